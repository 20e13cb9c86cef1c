//! Brute-force references used only for verification.
//!
//! Nothing here calls into the engine's or the tensor module's kernels: the
//! Tucker contraction, the reduction fold and the scalar activations are
//! plain index loops. Finite differences run their own loop-form forward
//! pass in double-double arithmetic, so the difference quotient is not
//! swamped by `f64` rounding of the loss.

use std::collections::BTreeMap;

use thiserror::Error;

mod dd;

pub use dd::Dd;

use crate::dsl::{validate_spec, Dims, FusionSpec, ReduceOp, ReductionPlan};
use crate::exec::Exec;
use crate::graph::EngineError;
use crate::params::{GradStore, ParamStore};
use crate::tensor::{Activation, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("{name}: expected shape {expected:?}, got {got:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input length mismatch: {0}")]
    Input(String),
    #[error("reduction: {0}")]
    Reduce(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

type Result<T> = std::result::Result<T, OracleError>;

/// Core tensor of shape `t_q × t_v × t_o`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreTensor {
    pub data: Tensor,
}

impl CoreTensor {
    pub fn slice(&self, k: usize) -> Vec<f64> {
        let s = self.data.shape();
        let (tq, tv, to) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; tq * tv];
        for i in 0..tq {
            for j in 0..tv {
                out[i * tv + j] = self.data.data()[(i * tv + j) * to + k];
            }
        }
        out
    }
}

fn fetch<'a>(params: &'a ParamStore, name: &str, shape: &[usize]) -> Result<&'a [f64]> {
    let t = params.get(name).ok_or_else(|| OracleError::Missing(name.into()))?;
    if t.shape() != shape {
        return Err(OracleError::Shape {
            name: name.into(),
            expected: shape.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    Ok(t.data())
}

/// `core[i, j, k] = Σ_r M_r[k, i] · N_r[k, j]`: every mode-3 slice is a sum
/// of `rank` outer products, one per branch.
pub fn build_core_tensor(params: &ParamStore, rank: usize, dims: &Dims) -> Result<CoreTensor> {
    let (tq, tv, to) = (dims.t_q, dims.t_v, dims.t_o);
    let mut data = vec![0.0; tq * tv * to];
    for r in 1..=rank {
        let m = fetch(params, &format!("M_{r}"), &[to, tq])?;
        let n = fetch(params, &format!("N_{r}"), &[to, tv])?;
        for k in 0..to {
            for i in 0..tq {
                for j in 0..tv {
                    data[(i * tv + j) * to + k] += m[k * tq + i] * n[k * tv + j];
                }
            }
        }
    }
    let data = Tensor::new(vec![tq, tv, to], data).map_err(|e| OracleError::Input(e.to_string()))?;
    Ok(CoreTensor { data })
}

/// Which input is contracted into the core tensor first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionOrder {
    QuestionFirst,
    VisualFirst,
}

/// `y = ((core ×₁ q̃) ×₂ ṽ) ×₃ Wo + bo` with `q̃ = Wq q`, `ṽ = Wv v`.
pub fn tucker_forward(core: &CoreTensor, params: &ParamStore, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    tucker_forward_ordered(core, params, q, v, ContractionOrder::QuestionFirst)
}

pub fn tucker_forward_ordered(
    core: &CoreTensor,
    params: &ParamStore,
    q: &[f64],
    v: &[f64],
    order: ContractionOrder,
) -> Result<Vec<f64>> {
    let s = core.data.shape();
    let (tq, tv, to) = (s[0], s[1], s[2]);
    let wq = params.get("Wq").ok_or_else(|| OracleError::Missing("Wq".into()))?;
    let dq = wq.shape()[1];
    let wq = fetch(params, "Wq", &[tq, dq])?;
    let wv_t = params.get("Wv").ok_or_else(|| OracleError::Missing("Wv".into()))?;
    let dv = wv_t.shape()[1];
    let wv = fetch(params, "Wv", &[tv, dv])?;
    let wo_t = params.get("Wo").ok_or_else(|| OracleError::Missing("Wo".into()))?;
    let nc = wo_t.shape()[0];
    let wo = fetch(params, "Wo", &[nc, to])?;
    let bo = fetch(params, "bo", &[nc])?;
    if q.len() != dq || v.len() != dv {
        return Err(OracleError::Input(format!(
            "q has {} (want {dq}), v has {} (want {dv})",
            q.len(),
            v.len()
        )));
    }

    let mut qt = vec![0.0; tq];
    for i in 0..tq {
        for a in 0..dq {
            qt[i] += wq[i * dq + a] * q[a];
        }
    }
    let mut vt = vec![0.0; tv];
    for j in 0..tv {
        for a in 0..dv {
            vt[j] += wv[j * dv + a] * v[a];
        }
    }

    let c = core.data.data();
    let mut fused = vec![0.0; to];
    match order {
        ContractionOrder::QuestionFirst => {
            // T^q[j, k] = Σ_i core[i, j, k] q̃[i]
            let mut tqm = vec![0.0; tv * to];
            for i in 0..tq {
                for j in 0..tv {
                    for k in 0..to {
                        tqm[j * to + k] += c[(i * tv + j) * to + k] * qt[i];
                    }
                }
            }
            for j in 0..tv {
                for k in 0..to {
                    fused[k] += tqm[j * to + k] * vt[j];
                }
            }
        }
        ContractionOrder::VisualFirst => {
            let mut tvm = vec![0.0; tq * to];
            for i in 0..tq {
                for j in 0..tv {
                    for k in 0..to {
                        tvm[i * to + k] += c[(i * tv + j) * to + k] * vt[j];
                    }
                }
            }
            for i in 0..tq {
                for k in 0..to {
                    fused[k] += tvm[i * to + k] * qt[i];
                }
            }
        }
    }

    let mut y = bo.to_vec();
    for cls in 0..nc {
        for k in 0..to {
            y[cls] += wo[cls * to + k] * fused[k];
        }
    }
    Ok(y)
}

/// Euclidean norm of what is left of `matrix` after projecting it onto the
/// span of the rank-one matrices `left[r] ⊗ right[r]` (modified
/// Gram-Schmidt). Zero iff the matrix lies in that span.
pub fn span_residual(matrix: &[f64], left: &[Vec<f64>], right: &[Vec<f64>]) -> f64 {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (a, b) in left.iter().zip(right) {
        let mut u = Vec::with_capacity(a.len() * b.len());
        for &x in a {
            for &y in b {
                u.push(x * y);
            }
        }
        for e in &basis {
            let d: f64 = u.iter().zip(e).map(|(x, y)| x * y).sum();
            for (x, y) in u.iter_mut().zip(e) {
                *x -= d * y;
            }
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            basis.push(u.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut res = matrix.to_vec();
    for e in &basis {
        let d: f64 = res.iter().zip(e).map(|(x, y)| x * y).sum();
        for (x, y) in res.iter_mut().zip(e) {
            *x -= d * y;
        }
    }
    res.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scalar_activation(kind: Activation, x: f64) -> f64 {
    const LAMBDA: f64 = 1.050_700_987_355_480_5;
    const ALPHA: f64 = 1.673_263_242_354_377_2;
    match kind {
        Activation::Identity => x,
        Activation::LeakyRelu { slope } => {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        }
        Activation::Selu => {
            if x >= 0.0 {
                LAMBDA * x
            } else {
                LAMBDA * ALPHA * x.exp_m1()
            }
        }
        Activation::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                x.exp() / (1.0 + x.exp())
            }
        }
        Activation::Tanh => x.tanh(),
    }
}

fn combine(op: ReduceOp, a: f64, b: f64) -> f64 {
    match op {
        ReduceOp::Sum => a + b,
        ReduceOp::Prod => a * b,
    }
}

fn neutral(op: ReduceOp) -> f64 {
    match op {
        ReduceOp::Sum => 0.0,
        ReduceOp::Prod => 1.0,
    }
}

/// Second transcription of the reduction fold, one output element at a time.
pub fn brute_reduce(plan: &ReductionPlan, outputs: &BTreeMap<String, Tensor>) -> Result<Tensor> {
    let first = plan
        .steps
        .first()
        .ok_or_else(|| OracleError::Reduce("empty plan".into()))?;
    let mut used: Vec<&str> = Vec::new();
    for step in &plan.steps {
        if step.members.is_empty() {
            return Err(OracleError::Reduce("empty step".into()));
        }
        for m in &step.members {
            if !outputs.contains_key(m) {
                return Err(OracleError::Reduce(format!("no output for {m}")));
            }
            if used.contains(&m.as_str()) {
                return Err(OracleError::Reduce(format!("{m} used twice")));
            }
            used.push(m);
        }
    }
    if used.len() != outputs.len() {
        return Err(OracleError::Reduce("plan is not a partition of the outputs".into()));
    }
    let shape = outputs.values().next().unwrap().shape().to_vec();
    let len = outputs.values().next().unwrap().len();
    if outputs.values().any(|t| t.shape() != shape.as_slice()) {
        return Err(OracleError::Reduce("output shapes differ".into()));
    }
    let mut result = vec![0.0; len];
    for (e, slot) in result.iter_mut().enumerate() {
        let mut v = neutral(first.op);
        for step in &plan.steps {
            let mut vb = neutral(step.op);
            for m in &step.members {
                let mut x = outputs[m].data()[e];
                if let Some(sq) = step.squash {
                    x = scalar_activation(sq, x);
                }
                vb = combine(step.op, vb, x);
            }
            v = combine(step.op, v, vb);
        }
        *slot = v;
    }
    Ok(Tensor::new(shape, result).expect("shape taken from inputs"))
}

/// Central differences of the eval-mode loss:
/// `(L(θ + h) − L(θ − h)) / 2h` with `h = step · max(1, |θ|)`.
pub fn finite_diff_grad(
    spec: &FusionSpec,
    params: &ParamStore,
    q: &[f64],
    v: &[f64],
    label: usize,
    step: f64,
) -> Result<GradStore> {
    finite_diff_grad_with(spec, params, q, v, label, step, Exec::default())
}

pub fn finite_diff_grad_with(
    spec: &FusionSpec,
    params: &ParamStore,
    q: &[f64],
    v: &[f64],
    label: usize,
    step: f64,
    exec: Exec,
) -> Result<GradStore> {
    assert!(step > 0.0, "finite-difference step must be positive");
    if let Some(bad) = validate_spec(spec).first() {
        return Err(OracleError::Input(bad.to_string()));
    }
    precise_loss(spec, params, q, v, label)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let per_tensor: Vec<Tensor> = exec.map_slice(&names, |name| {
        let mut p = params.clone();
        let len = p.get(name).unwrap().len();
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let theta = p.get(name).unwrap().data()[i];
            let h = step * theta.abs().max(1.0);
            let (up_theta, down_theta) = (theta + h, theta - h);
            p.get_mut(name).unwrap().data_mut()[i] = up_theta;
            let up = precise_loss(spec, &p, q, v, label).unwrap();
            p.get_mut(name).unwrap().data_mut()[i] = down_theta;
            let down = precise_loss(spec, &p, q, v, label).unwrap();
            p.get_mut(name).unwrap().data_mut()[i] = theta;
            // divide by the step actually taken after rounding θ ± h
            *gi = ((up - down) / (Dd::new(up_theta) - Dd::new(down_theta))).to_f64();
        }
        Tensor::new(params.get(name).unwrap().shape().to_vec(), g).unwrap()
    });
    Ok(ParamStore::from_entries(names.into_iter().zip(per_tensor).collect()))
}

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

fn dd_activation(kind: Activation, x: Dd) -> Dd {
    match kind {
        Activation::Identity => x,
        Activation::LeakyRelu { slope } => {
            if x.hi >= 0.0 {
                x
            } else {
                x * slope
            }
        }
        Activation::Selu => {
            if x.hi >= 0.0 {
                x * SELU_LAMBDA
            } else {
                x.exp_m1() * SELU_ALPHA * SELU_LAMBDA
            }
        }
        Activation::Sigmoid => {
            if x.hi >= 0.0 {
                Dd::ONE / (Dd::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (Dd::ONE + e)
            }
        }
        Activation::Tanh => x.tanh(),
    }
}

/// `out[r] = Σ_c w[r, c]·x[c] (+ b[r])`, row-major `w` with `x.len()` columns.
fn dd_affine(w: &[f64], x: &[Dd], b: Option<&[f64]>) -> Vec<Dd> {
    let cols = x.len();
    let rows = w.len() / cols;
    (0..rows)
        .map(|r| {
            let mut s = b.map_or(Dd::ZERO, |b| Dd::new(b[r]));
            for c in 0..cols {
                s = s + x[c] * w[r * cols + c];
            }
            s
        })
        .collect()
}

/// Cross-entropy loss in eval mode (no dropout), evaluated in double-double.
pub fn precise_loss(spec: &FusionSpec, params: &ParamStore, q: &[f64], v: &[f64], label: usize) -> Result<Dd> {
    let d = spec.dims;
    if q.len() != d.d_q || v.len() != d.d_v {
        return Err(OracleError::Input(format!(
            "expected q of {} and v of {}, got {} and {}",
            d.d_q,
            d.d_v,
            q.len(),
            v.len()
        )));
    }
    if label >= d.n_classes {
        return Err(OracleError::Input(format!("label {label} out of range")));
    }
    let q: Vec<Dd> = q.iter().map(|&x| Dd::new(x)).collect();
    let v: Vec<Dd> = v.iter().map(|&x| Dd::new(x)).collect();
    let qt = dd_affine(fetch(params, "Wq", &[d.t_q, d.d_q])?, &q, None);
    let vt = dd_affine(fetch(params, "Wv", &[d.t_v, d.d_v])?, &v, None);

    let mut outputs: BTreeMap<&str, Vec<Dd>> = BTreeMap::new();
    for (i, b) in spec.branches.iter().enumerate() {
        let r = i + 1;
        let a = dd_affine(fetch(params, &format!("M_{r}"), &[d.t_o, d.t_q])?, &qt, None);
        let c = dd_affine(fetch(params, &format!("N_{r}"), &[d.t_o, d.t_v])?, &vt, None);
        let x: Vec<Dd> = a
            .iter()
            .zip(&c)
            .map(|(&a, &c)| dd_activation(b.f_q, a) * dd_activation(b.f_v, c))
            .collect();
        let p = b.post;
        let out = if p.layers == 0 {
            x
        } else {
            let mut y = x.clone();
            let mut h = x;
            for l in 1..=p.layers {
                let fan_in = if l == 1 { d.t_o } else { p.hidden };
                let w = fetch(params, &format!("phi_{r}_{l}_W"), &[p.hidden, fan_in])?;
                let bias = fetch(params, &format!("phi_{r}_{l}_b"), &[p.hidden])?;
                h = dd_affine(w, &h, Some(bias))
                    .into_iter()
                    .map(|z| dd_activation(b.f_q, z))
                    .collect();
                if l % p.skip == 0 {
                    let tap = if p.hidden == d.t_o {
                        h.clone()
                    } else {
                        dd_affine(
                            fetch(params, &format!("phi_{r}_skip_{l}_W"), &[d.t_o, p.hidden])?,
                            &h,
                            None,
                        )
                    };
                    y.iter_mut().zip(tap).for_each(|(a, t)| *a = *a + t);
                }
            }
            let w = fetch(params, &format!("phi_{r}_out_W"), &[d.t_o, p.hidden])?;
            let bias = fetch(params, &format!("phi_{r}_out_b"), &[d.t_o])?;
            let proj = dd_affine(w, &h, Some(bias));
            y.iter().zip(proj).map(|(a, b)| *a + b).collect()
        };
        outputs.insert(&b.id, out);
    }

    let first = spec.plan.steps[0].op;
    let mut fused = vec![dd_neutral(first); d.t_o];
    for step in &spec.plan.steps {
        let mut group = vec![dd_neutral(step.op); d.t_o];
        for m in &step.members {
            for (g, &x) in group.iter_mut().zip(&outputs[m.as_str()]) {
                let x = step.squash.map_or(x, |sq| dd_activation(sq, x));
                *g = dd_combine(step.op, *g, x);
            }
        }
        for (f, g) in fused.iter_mut().zip(group) {
            *f = dd_combine(step.op, *f, g);
        }
    }

    let logits = dd_affine(
        fetch(params, "Wo", &[d.n_classes, d.t_o])?,
        &fused,
        Some(fetch(params, "bo", &[d.n_classes])?),
    );
    let top = logits.iter().fold(logits[0], |m, &y| if y > m { y } else { m });
    let mut z = Dd::ZERO;
    for &y in &logits {
        z = z + (y - top).exp();
    }
    Ok(z.ln() + top - logits[label])
}

fn dd_neutral(op: ReduceOp) -> Dd {
    match op {
        ReduceOp::Sum => Dd::ZERO,
        ReduceOp::Prod => Dd::ONE,
    }
}

fn dd_combine(op: ReduceOp, a: Dd, b: Dd) -> Dd {
    match op {
        ReduceOp::Sum => a + b,
        ReduceOp::Prod => a * b,
    }
}

/// Worst per-coordinate disagreement between two gradient stores.
#[derive(Debug, Clone, PartialEq)]
pub struct GradDiff {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn grad_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// The coordinate with the largest relative error (first one on ties).
pub fn worst_grad_diff(analytic: &GradStore, numeric: &GradStore) -> Option<GradDiff> {
    let mut worst: Option<GradDiff> = None;
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = grad_rel_err(x, y);
            if worst.as_ref().is_none_or(|w| e > w.rel_err) {
                worst = Some(GradDiff {
                    name: name.to_string(),
                    index: i,
                    analytic: x,
                    numeric: y,
                    rel_err: e,
                });
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_the_step_is_stable() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for seed in 0..5 {
            let spec = crate::checks::random_grad_spec(&mut rng);
            let engine = crate::graph::Engine::new(&spec).unwrap();
            let (p, q, v, label, _) = crate::checks::grad_instance(&engine, seed).unwrap();
            let a = finite_diff_grad(&spec, &p, &q, &v, label, 1e-5).unwrap();
            let b = finite_diff_grad(&spec, &p, &q, &v, label, 5e-6).unwrap();
            for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
                for (&x, &y) in x.data().iter().zip(y.data()) {
                    if x.abs() > 1e-3 {
                        assert!((x - y).abs() <= 1e-6 * x.abs(), "{x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn precise_loss_tracks_engine_loss() {
        use crate::graph::Engine;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..40 {
            let spec = crate::checks::random_grad_spec(&mut rng);
            let mut p = crate::params::init_params(&spec, rng.random());
            crate::checks::randomize_biases(&mut p, &mut rng);
            let q = crate::checks::normal_vec(&mut rng, spec.dims.d_q, 1.0);
            let v = crate::checks::normal_vec(&mut rng, spec.dims.d_v, 1.0);
            let label = rng.random_range(0..spec.dims.n_classes);
            let engine = Engine::new(&spec).unwrap().eval_loss(&p, &q, &v, label).unwrap();
            let precise = precise_loss(&spec, &p, &q, &v, label).unwrap().to_f64();
            assert!(
                (engine - precise).abs() <= 1e-13 * precise.abs().max(1.0),
                "{engine} vs {precise}"
            );
        }
    }
    use crate::dsl::{preset, ReductionStep};
    use crate::params::init_params;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
        ParamStore::from_entries(
            entries
                .iter()
                .map(|(n, s, d)| (n.to_string(), Tensor::new(s.clone(), d.clone()).unwrap()))
                .collect(),
        )
    }

    #[test]
    fn single_outer_product_core() {
        let p = store(&[("M_1", vec![1, 2], vec![1.0, 2.0]), ("N_1", vec![1, 2], vec![3.0, 4.0])]);
        let core = build_core_tensor(&p, 1, &Dims::new(1, 1, 2, 2, 1, 1)).unwrap();
        assert_eq!(core.slice(0), vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn zero_second_factor_changes_nothing() {
        let dims = Dims::new(3, 3, 3, 4, 2, 2);
        let spec = preset("mutan_r5", dims, 2).unwrap();
        let mut p = init_params(&spec, 4);
        p.set("M_2", Tensor::zeros(&[2, 3])).unwrap();
        p.set("N_2", Tensor::zeros(&[2, 4])).unwrap();
        let two = build_core_tensor(&p, 2, &dims).unwrap();
        let one = build_core_tensor(&p, 1, &dims).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn slices_have_rank_at_most_r() {
        let dims = Dims::new(2, 2, 4, 5, 3, 2);
        let spec = preset("mutan_r5", dims, 3).unwrap();
        let p = init_params(&spec, 12);
        let core = build_core_tensor(&p, 3, &dims).unwrap();
        for k in 0..3 {
            let left: Vec<Vec<f64>> = (1..=3)
                .map(|r| p.get(&format!("M_{r}")).unwrap().data()[k * 4..k * 4 + 4].to_vec())
                .collect();
            let right: Vec<Vec<f64>> = (1..=3)
                .map(|r| p.get(&format!("N_{r}")).unwrap().data()[k * 5..k * 5 + 5].to_vec())
                .collect();
            assert!(span_residual(&core.slice(k), &left, &right) <= 1e-10);
            // two of the three factors cannot span a generic rank-3 slice
            assert!(span_residual(&core.slice(k), &left[..2], &right[..2]) > 1e-3);
        }
    }

    #[test]
    fn zero_core_gives_bias() {
        let dims = Dims::new(2, 3, 2, 2, 2, 3);
        let spec = preset("mutan_r5", dims, 1).unwrap();
        let mut p = init_params(&spec, 3);
        p.set("bo", t(&[0.5, -1.0, 2.0])).unwrap();
        let core = CoreTensor {
            data: Tensor::zeros(&[2, 2, 2]),
        };
        let y = tucker_forward(&core, &p, &[1.0, 2.0], &[0.5, 0.1, -1.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn scalar_collapse() {
        // t_q = t_v = t_o = 1: y = Wo · (m q̃ · n ṽ) + bo
        let p = store(&[
            ("Wq", vec![1, 1], vec![2.0]),
            ("Wv", vec![1, 1], vec![-3.0]),
            ("Wo", vec![1, 1], vec![0.5]),
            ("bo", vec![1], vec![0.25]),
            ("M_1", vec![1, 1], vec![1.5]),
            ("N_1", vec![1, 1], vec![4.0]),
        ]);
        let dims = Dims::new(1, 1, 1, 1, 1, 1);
        let core = build_core_tensor(&p, 1, &dims).unwrap();
        let y = tucker_forward(&core, &p, &[1.0], &[2.0]).unwrap();
        // q̃ = 2, ṽ = −6, fused = 1.5·2 · 4·(−6) = −72
        assert_eq!(y, vec![0.5 * -72.0 + 0.25]);
        let y2 = tucker_forward_ordered(&core, &p, &[1.0], &[2.0], ContractionOrder::VisualFirst).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn brute_reduce_basics() {
        let mut outs = BTreeMap::new();
        outs.insert("a".to_string(), t(&[1.0, 2.0]));
        outs.insert("b".to_string(), t(&[3.0, 4.0]));
        outs.insert("c".to_string(), t(&[-1.0, 0.5]));
        let sum = ReductionPlan {
            steps: vec![ReductionStep::new(ReduceOp::Sum, ["a", "b", "c"])],
        };
        assert_eq!(brute_reduce(&sum, &outs).unwrap().data(), &[3.0, 6.5]);
        let prod = ReductionPlan {
            steps: vec![ReductionStep::new(ReduceOp::Prod, ["a", "b", "c"])],
        };
        assert_eq!(brute_reduce(&prod, &outs).unwrap().data(), &[-3.0, 4.0]);
        let partial = ReductionPlan {
            steps: vec![ReductionStep::new(ReduceOp::Prod, ["a", "b"])],
        };
        assert!(brute_reduce(&partial, &outs).is_err());
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(grad_rel_err(0.0, 0.0), 0.0);
        assert_eq!(grad_rel_err(1e-9, 0.0), 1e-9 / 1e-8);
        assert!((grad_rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
