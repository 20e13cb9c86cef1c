//! Synthetic teacher–student data, Adam, and the epoch loop with
//! best-validation selection.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::FusionSpec;
use crate::exec::Exec;
use crate::graph::{BatchItem, Engine, EngineError};
use crate::params::{init_params, GradStore, ParamStore};

const MAGIC: &[u8; 4] = b"FQVD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite training loss in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub label: usize,
}

/// A labelled set of `(q, v)` pairs with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_q: usize,
    pub d_v: usize,
    pub n_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// First `n` examples and the rest, both keeping the header.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |ex: &[Example]| Dataset {
            examples: ex.to_vec(),
            ..*self
        };
        (part(&self.examples[..n]), part(&self.examples[n..]))
    }

    /// Label counts indexed by class.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for e in &self.examples {
            h[e.label] += 1;
        }
        h
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let u32_of = |x: usize, what: &str| {
            u32::try_from(x).map_err(|_| TrainError::Format(format!("{what} {x} does not fit in u32")))
        };
        w.write_all(MAGIC)?;
        for (x, what) in [
            (1, "version"),
            (self.len(), "n"),
            (self.d_q, "d_q"),
            (self.d_v, "d_v"),
            (self.n_classes, "n_classes"),
        ] {
            w.write_all(&u32_of(x, what)?.to_le_bytes())?;
        }
        for e in &self.examples {
            if e.q.len() != self.d_q || e.v.len() != self.d_v || e.label >= self.n_classes {
                return Err(TrainError::Format("example does not match header".into()));
            }
            for x in e.q.iter().chain(&e.v) {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&u32_of(e.label, "label")?.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TrainError::Format("bad magic".into()));
        }
        let read_u32 = |r: &mut dyn Read| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = read_u32(&mut r)?;
        if version != VERSION as usize {
            return Err(TrainError::Format(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)?;
        let d_q = read_u32(&mut r)?;
        let d_v = read_u32(&mut r)?;
        let n_classes = read_u32(&mut r)?;
        let mut examples = Vec::with_capacity(n.min(1 << 20));
        let mut b = [0u8; 8];
        for _ in 0..n {
            let mut vec_of = |len: usize| -> Result<Vec<f64>> {
                (0..len)
                    .map(|_| {
                        r.read_exact(&mut b)?;
                        Ok(f64::from_le_bytes(b))
                    })
                    .collect()
            };
            let q = vec_of(d_q)?;
            let v = vec_of(d_v)?;
            let label = read_u32(&mut r)?;
            if label >= n_classes {
                return Err(TrainError::Format(format!("label {label} >= n_classes {n_classes}")));
            }
            examples.push(Example { q, v, label });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(TrainError::Format("trailing bytes".into()));
        }
        Ok(Dataset {
            d_q,
            d_v,
            n_classes,
            examples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::read_from(BufReader::new(File::open(path)?))
    }
}

/// Label `n` Gaussian inputs (std `input_scale`) with the argmax of a teacher
/// initialized from `teacher_seed`.
pub fn generate_synthetic_dataset(
    teacher: &FusionSpec,
    teacher_seed: u64,
    n: usize,
    input_scale: f64,
    data_seed: u64,
) -> Result<Dataset> {
    let params = init_params(teacher, teacher_seed);
    generate_with_params(teacher, &params, n, input_scale, data_seed)
}

/// As [`generate_synthetic_dataset`] with explicit teacher parameters.
pub fn generate_with_params(
    teacher: &FusionSpec,
    params: &ParamStore,
    n: usize,
    input_scale: f64,
    data_seed: u64,
) -> Result<Dataset> {
    let engine = Engine::new(teacher)?;
    engine.check_params(params)?;
    let d = teacher.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| input_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    };
    let inputs: Vec<(Vec<f64>, Vec<f64>)> = (0..n).map(|_| (draw(d.d_q), draw(d.d_v))).collect();
    let labels = Exec::default().map_slice(&inputs, |(q, v)| {
        engine.forward(params, q, v, false, 0).map(|t| t.predicted())
    });
    let examples = inputs
        .into_iter()
        .zip(labels)
        .map(|((q, v), label)| Ok(Example { q, v, label: label? }))
        .collect::<std::result::Result<Vec<_>, EngineError>>()?;
    Ok(Dataset {
        d_q: d.d_q,
        d_v: d.d_v,
        n_classes: d.n_classes,
        examples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: Option<usize>,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            max_epochs: 100,
            patience: None,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == Some(0) {
            return bad("patience must be >= 1");
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    cfg: &TrainConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(TrainError::Config("adam step index starts at 1".into()));
    }
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(TrainError::Dims(
            "params, grads and optimizer state differ in layout".into(),
        ));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads.slot(i);
        let m = state.m.slot_mut(i);
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v.slot_mut(i);
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m.slot(i), state.v.slot(i));
        for ((p, mj), vj) in params.slot_mut(i).iter_mut().zip(m).zip(v) {
            let m_hat = mj / c1;
            let v_hat = vj / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean loss over the epoch's training examples, each measured before
    /// the update of its own batch.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub wall_time_secs: f64,
}

impl Metrics {
    /// One JSON object per epoch. Wall time is left out so the output is
    /// reproducible.
    pub fn write_jsonl(&self, mut w: impl Write) -> io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn check_dims(spec: &FusionSpec, data: &Dataset, which: &str) -> Result<()> {
    let d = spec.dims;
    if (data.d_q, data.d_v, data.n_classes) != (d.d_q, d.d_v, d.n_classes) {
        return Err(TrainError::Dims(format!(
            "{which} set has (d_q, d_v, classes) = ({}, {}, {}), spec expects ({}, {}, {})",
            data.d_q, data.d_v, data.n_classes, d.d_q, d.d_v, d.n_classes
        )));
    }
    Ok(())
}

/// SplitMix64 finalizer, used to derive per-example dropout seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Train a fresh student initialized from `cfg.seed` and return the
/// parameters of the epoch with the best validation accuracy (earliest on
/// ties).
pub fn train(
    spec: &FusionSpec,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ParamStore, Metrics)> {
    let params = init_params(spec, cfg.seed);
    train_from(spec, params, train_set, val_set, cfg)
}

/// As [`train`], starting from the given parameters.
pub fn train_from(
    spec: &FusionSpec,
    mut params: ParamStore,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ParamStore, Metrics)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config(
            "training and validation sets must be nonempty".into(),
        ));
    }
    check_dims(spec, train_set, "training")?;
    check_dims(spec, val_set, "validation")?;
    let engine = Engine::new(spec)?;
    engine.check_params(&params)?;
    let start = Instant::now();

    let dropout = spec.branches.iter().any(|b| b.post.dropout > 0.0);
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut t = 0u64;
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        shuffler.set_stream(epoch as u64);
        shuffler.set_word_pos(0);
        order.sort_unstable();
        order.shuffle(&mut shuffler);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| {
                    let e = &train_set.examples[i];
                    BatchItem {
                        q: &e.q,
                        v: &e.v,
                        label: e.label,
                        seed: mix(mix(cfg.seed, epoch as u64), i as u64),
                    }
                })
                .collect();
            let (grads, l, c) = engine.batch_grad(&params, &batch, dropout, cfg.exec)?;
            loss_sum += l;
            correct += c;
            t += 1;
            adam_step(&mut params, &grads, &mut state, cfg, t)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        let val_acc = evaluate_with(&engine, &params, val_set, cfg.exec)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        });
        if val_acc > best.2 {
            best = (params.clone(), epoch, val_acc);
        }
        if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    let (params, best_epoch, best_val_acc) = best;
    Ok((
        params,
        Metrics {
            epochs,
            best_epoch,
            best_val_acc,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Top-1 accuracy in eval mode; ties go to the smallest class index.
pub fn evaluate(spec: &FusionSpec, params: &ParamStore, data: &Dataset) -> Result<f64> {
    check_dims(spec, data, "evaluation")?;
    evaluate_with(&Engine::new(spec)?, params, data, Exec::default())
}

fn evaluate_with(engine: &Engine, params: &ParamStore, data: &Dataset, exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = exec.map_slice(&data.examples, |e| {
        engine
            .forward(params, &e.q, &e.v, false, 0)
            .map(|t| t.predicted() == e.label)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.len() as f64)
}
