//! Enumerating and ranking fusion specs: the activation-pair grid on a probe
//! branch, seeded random sampling of the design space, and a short-budget
//! screening sweep.

use std::cmp::Ordering;
use std::io::{self, Write};
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::{serialize_spec, BranchSpec, Dims, FusionSpec, PostFusion, ReduceOp, ReductionPlan, ReductionStep};
use crate::exec::Exec;
use crate::tensor::Activation;
use crate::train::{train, Dataset, TrainConfig};

/// Index of the branch whose activations the grid varies.
pub const PROBE_BRANCH: usize = 0;

/// One spec per `(f_q, f_v)` pair on the probe branch, `f_q` major, in
/// [`Activation::ALL`] order.
pub fn grid_nonlinearity_pairs(base: &FusionSpec) -> Vec<FusionSpec> {
    let mut out = Vec::with_capacity(25);
    for f_q in Activation::ALL {
        for f_v in Activation::ALL {
            let mut s = base.clone();
            s.branches[PROBE_BRANCH].f_q = f_q;
            s.branches[PROBE_BRANCH].f_v = f_v;
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanShape {
    /// `sum(b1..bR)`
    SumAll,
    /// `sum(b1..b(R-1))` then `prod(bR)` with a sigmoid squash.
    FeatureGating,
    /// As `FeatureGating` with a tanh squash.
    PolaritySwap,
    /// `sum` over a random nonempty prefix, `prod` over the rest.
    TwoGroup,
}

impl PlanShape {
    pub const ALL: [PlanShape; 4] = [
        PlanShape::SumAll,
        PlanShape::FeatureGating,
        PlanShape::PolaritySwap,
        PlanShape::TwoGroup,
    ];

    /// Build the plan over `ids`. With a single branch every shape
    /// collapses to one sum step. `split` is the size of the first group
    /// for [`PlanShape::TwoGroup`] and is clamped to `1..ids.len()`.
    pub fn plan(self, ids: &[String], split: usize) -> ReductionPlan {
        let sum_all = || ReductionPlan {
            steps: vec![ReductionStep::new(ReduceOp::Sum, ids.to_vec())],
        };
        if ids.len() < 2 {
            return sum_all();
        }
        let gated = |head: &[String], tail: &[String], squash: Option<Activation>| {
            let mut prod = ReductionStep::new(ReduceOp::Prod, tail.to_vec());
            prod.squash = squash;
            ReductionPlan {
                steps: vec![ReductionStep::new(ReduceOp::Sum, head.to_vec()), prod],
            }
        };
        let last = ids.len() - 1;
        match self {
            PlanShape::SumAll => sum_all(),
            PlanShape::FeatureGating => gated(&ids[..last], &ids[last..], Some(Activation::Sigmoid)),
            PlanShape::PolaritySwap => gated(&ids[..last], &ids[last..], Some(Activation::Tanh)),
            PlanShape::TwoGroup => {
                let k = split.clamp(1, last);
                gated(&ids[..k], &ids[k..], None)
            }
        }
    }
}

/// Bounds for [`random_search`]. Input widths and class count are fixed by
/// the data; the factor widths, rank, plan shape and Φ are sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub d_q: usize,
    pub d_v: usize,
    pub n_classes: usize,
    pub t_q: RangeInclusive<usize>,
    pub t_v: RangeInclusive<usize>,
    pub t_o: RangeInclusive<usize>,
    pub rank: RangeInclusive<usize>,
    pub shapes: Vec<PlanShape>,
    /// Candidate Φ depths; 0 means identity.
    pub phi_layers: Vec<usize>,
    pub phi_hidden: RangeInclusive<usize>,
}

impl SearchSpace {
    /// A desk-scale space around the given data dims.
    pub fn around(d_q: usize, d_v: usize, n_classes: usize) -> Self {
        Self {
            d_q,
            d_v,
            n_classes,
            t_q: 4..=16,
            t_v: 4..=16,
            t_o: 4..=16,
            rank: 1..=5,
            shapes: PlanShape::ALL.to_vec(),
            phi_layers: vec![0, 3, 6],
            phi_hidden: 4..=32,
        }
    }
}

fn pick<T: Copy>(rng: &mut impl Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// `budget` specs drawn from `space`, deterministic in `seed`.
pub fn random_search(space: &SearchSpace, seed: u64, budget: usize) -> Vec<FusionSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = if space.shapes.is_empty() {
        &[PlanShape::SumAll][..]
    } else {
        &space.shapes[..]
    };
    let layers = if space.phi_layers.is_empty() {
        &[0][..]
    } else {
        &space.phi_layers[..]
    };
    (0..budget)
        .map(|_| {
            let dims = Dims::new(
                space.d_q,
                space.d_v,
                rng.random_range(space.t_q.clone()),
                rng.random_range(space.t_v.clone()),
                rng.random_range(space.t_o.clone()),
                space.n_classes,
            );
            let rank = rng.random_range(space.rank.clone()).max(1);
            let shape = pick(&mut rng, shapes);
            let branches: Vec<BranchSpec> = (1..=rank)
                .map(|r| {
                    let mut b = BranchSpec::new(
                        format!("b{r}"),
                        pick(&mut rng, &Activation::ALL),
                        pick(&mut rng, &Activation::ALL),
                    );
                    let depth = pick(&mut rng, layers);
                    if depth > 0 {
                        b.post = PostFusion::mlp(depth, rng.random_range(space.phi_hidden.clone()).max(1));
                    }
                    b
                })
                .collect();
            let ids: Vec<String> = branches.iter().map(|b| b.id.clone()).collect();
            let split = rng.random_range(1..=rank.max(2) - 1);
            FusionSpec {
                dims,
                branches,
                plan: shape.plan(&ids, split),
                seed_hint: None,
            }
        })
        .collect()
}

/// One screened candidate. A failed candidate has `val_acc = NaN`
/// (serialized as `null`) and sorts last.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub rank: usize,
    pub val_acc: f64,
    pub best_epoch: usize,
    pub spec: String,
    #[serde(skip)]
    pub candidate: usize,
    #[serde(skip)]
    pub error: Option<String>,
}

impl SearchResult {
    pub fn failed(&self) -> bool {
        self.val_acc.is_nan()
    }
}

/// The screening defaults: five epochs, everything else as [`TrainConfig`].
pub fn screening_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 5,
        seed,
        ..TrainConfig::default()
    }
}

fn by_accuracy(a: &SearchResult, b: &SearchResult) -> Ordering {
    match (a.failed(), b.failed()) {
        (false, false) => b.val_acc.total_cmp(&a.val_acc),
        (x, y) => x.cmp(&y),
    }
    .then_with(|| a.spec.cmp(&b.spec))
    .then_with(|| a.candidate.cmp(&b.candidate))
}

/// Train every candidate with `cfg` and rank by validation accuracy,
/// descending, ties by canonical spec text. Candidates run under `exec`;
/// each training run itself is sequential.
pub fn run_search(
    candidates: &[FusionSpec],
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    exec: Exec,
) -> Vec<SearchResult> {
    let inner = TrainConfig {
        exec: Exec::Sequential,
        ..cfg.clone()
    };
    let mut results = exec.map(candidates.len(), |i| {
        let spec = &candidates[i];
        let text = serialize_spec(spec);
        match train(spec, train_set, val_set, &inner) {
            Ok((_, m)) => SearchResult {
                rank: 0,
                val_acc: m.best_val_acc,
                best_epoch: m.best_epoch,
                spec: text,
                candidate: i,
                error: None,
            },
            Err(e) => SearchResult {
                rank: 0,
                val_acc: f64::NAN,
                best_epoch: 0,
                spec: text,
                candidate: i,
                error: Some(e.to_string()),
            },
        }
    });
    results.sort_by(by_accuracy);
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    results
}

pub fn write_results_jsonl(results: &[SearchResult], mut w: impl Write) -> io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
