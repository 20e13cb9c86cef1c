//! Seeded verification sweeps shared by the CLI and the test suites: the
//! Hadamard-form vs. explicit Tucker equivalence and the analytic vs.
//! finite-difference gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsl::{BranchSpec, Dims, FusionSpec, PostFusion};
use crate::exec::Exec;
use crate::graph::{Engine, EngineError, Fault};
use crate::oracle::{self, GradDiff, OracleError};
use crate::params::{init_params, ParamStore};
use crate::search::PlanShape;
use crate::tensor::Activation;

pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Minimum |pre-activation| at a leaky ReLU / SeLU input for a gradient
/// check instance to be accepted.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`; zero when both are zero.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Small random dims: `t_q, t_v ∈ 2..=6`, `t_o ∈ 2..=4`, inputs `2..=6`,
/// classes `2..=5`.
pub fn small_dims(rng: &mut impl Rng) -> Dims {
    Dims::new(
        rng.random_range(2..=6),
        rng.random_range(2..=6),
        rng.random_range(2..=6),
        rng.random_range(2..=6),
        rng.random_range(2..=4),
        rng.random_range(2..=5),
    )
}

/// Replace every `bo` and Φ bias with small random values so bias paths are
/// exercised (init leaves them at zero).
pub fn randomize_biases(params: &mut ParamStore, rng: &mut impl Rng) {
    for (name, t) in params.iter_mut() {
        if name == "bo" || name.ends_with("_b") {
            for x in t.data_mut() {
                *x = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceCase {
    pub seed: u64,
    pub dims: Dims,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub cases: Vec<EquivalenceCase>,
    pub max_rel_err: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= EQUIVALENCE_TOL
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EquivalenceOptions {
    /// Draw fresh small dims per seed instead of the spec's own.
    pub small_dims: bool,
    /// Negative control: perturb `N_2` (or `N_1` at rank 1) after the core
    /// tensor is built, so the two routes disagree.
    pub corrupt_n2: bool,
}

/// For each seed, compare the engine's logits for the identity form of
/// `spec` against the explicit core-tensor contraction.
pub fn run_equivalence(
    spec: &FusionSpec,
    seeds: u64,
    opts: EquivalenceOptions,
    exec: Exec,
) -> Result<EquivalenceReport, OracleError> {
    let base = spec.to_identity_form();
    let results = exec.map(seeds as usize, |i| -> Result<EquivalenceCase, OracleError> {
        let seed = i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fe9u64);
        let dims = if opts.small_dims {
            small_dims(&mut rng)
        } else {
            base.dims
        };
        let spec = base.clone().with_dims(dims);
        let mut params = init_params(&spec, seed);
        randomize_biases(&mut params, &mut rng);
        let q = normal_vec(&mut rng, dims.d_q, 1.0);
        let v = normal_vec(&mut rng, dims.d_v, 1.0);
        let core = oracle::build_core_tensor(&params, spec.rank(), &dims)?;
        let expected = oracle::tucker_forward(&core, &params, &q, &v)?;
        if opts.corrupt_n2 {
            let name = if spec.rank() >= 2 { "N_2" } else { "N_1" };
            let n2 = params.get_mut(name).unwrap();
            n2.data_mut()[0] += 0.5;
        }
        let trace = Engine::new(&spec)?.forward(&params, &q, &v, false, seed)?;
        Ok(EquivalenceCase {
            seed,
            dims,
            rel_err: max_rel_err(&trace.logits, &expected),
        })
    });
    let cases = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let max_rel_err = cases.iter().fold(0.0f64, |m, c| m.max(c.rel_err));
    Ok(EquivalenceReport { cases, max_rel_err })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub seed: u64,
    pub worst: Option<GradDiff>,
    pub kink_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub cases: Vec<GradCase>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&GradDiff> {
        self.cases
            .iter()
            .filter_map(|c| c.worst.as_ref())
            .fold(None, |m: Option<&GradDiff>, d| match m {
                Some(w) if w.rel_err >= d.rel_err => Some(w),
                _ => Some(d),
            })
    }

    pub fn passed(&self) -> bool {
        self.worst().is_none_or(|w| w.rel_err <= GRAD_TOL)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckOptions {
    /// Shrink to small random dims and cap Φ width at 5 units.
    pub small_dims: bool,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

/// Params, question, visual input, label and kink margin.
pub type GradInstance = (ParamStore, Vec<f64>, Vec<f64>, usize, f64);

/// Draw a random instance for `spec` at `seed`: params with random biases,
/// inputs, and a label. Inputs are redrawn (up to 50 times) until every
/// kinked activation sees |pre-activation| ≥ [`KINK_MARGIN`].
pub fn grad_instance(engine: &Engine, seed: u64) -> Result<GradInstance, EngineError> {
    let spec = engine.spec();
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x6ad);
    let mut params = init_params(spec, seed);
    randomize_biases(&mut params, &mut rng);
    let label = rng.random_range(0..dims.n_classes);
    let mut best = None;
    for _ in 0..50 {
        let q = normal_vec(&mut rng, dims.d_q, 1.0);
        let v = normal_vec(&mut rng, dims.d_v, 1.0);
        let trace = engine.forward(&params, &q, &v, false, seed)?;
        let margin = engine.kink_margin(&trace);
        if margin >= KINK_MARGIN {
            return Ok((params, q, v, label, margin));
        }
        if best.as_ref().is_none_or(|(_, _, m)| margin > *m) {
            best = Some((q, v, margin));
        }
    }
    let (q, v, margin) = best.unwrap();
    Ok((params, q, v, label, margin))
}

/// Shrink dims and Φ width so finite differences stay cheap.
pub fn shrink_for_grad_check(spec: &FusionSpec, rng: &mut impl Rng) -> FusionSpec {
    let mut s = spec.clone().with_dims(small_dims(rng));
    for b in &mut s.branches {
        if b.post.layers > 0 {
            b.post.hidden = b.post.hidden.min(5);
        }
    }
    s
}

fn pick_activation(rng: &mut impl Rng) -> Activation {
    Activation::ALL[rng.random_range(0..Activation::ALL.len())]
}

/// A random small spec: rank 1..=3, random activations per branch, Φ drawn
/// from {identity, 3 layers, 6 layers} and a sum-all, feature-gating or
/// polarity-swap plan.
pub fn random_grad_spec(rng: &mut impl Rng) -> FusionSpec {
    let dims = small_dims(rng);
    let shape = [PlanShape::SumAll, PlanShape::FeatureGating, PlanShape::PolaritySwap][rng.random_range(0..3)];
    let rank = match shape {
        PlanShape::SumAll => rng.random_range(1..=3),
        _ => rng.random_range(2..=3),
    };
    let branches = (1..=rank)
        .map(|r| {
            let mut b = BranchSpec::new(format!("b{r}"), pick_activation(rng), pick_activation(rng));
            b.post = match rng.random_range(0..3) {
                0 => PostFusion::default(),
                1 => PostFusion::mlp(3, rng.random_range(2..=5)),
                _ => PostFusion::mlp(6, rng.random_range(2..=5)),
            };
            b
        })
        .collect::<Vec<_>>();
    let ids: Vec<String> = branches.iter().map(|b| b.id.clone()).collect();
    let plan = shape.plan(&ids, rank - 1);
    FusionSpec {
        dims,
        branches,
        plan,
        seed_hint: None,
    }
}

/// Compare `Engine::backward` with central differences on `seeds` random
/// instances.
pub fn run_grad_check(
    spec: &FusionSpec,
    seeds: u64,
    opts: GradCheckOptions,
    exec: Exec,
) -> Result<GradReport, OracleError> {
    let cases = exec.map(seeds as usize, |i| -> Result<GradCase, OracleError> {
        let seed = i as u64;
        let spec = if opts.small_dims {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5);
            shrink_for_grad_check(spec, &mut rng)
        } else {
            spec.clone()
        };
        let mut engine = Engine::new(&spec)?;
        let (params, q, v, label, margin) = grad_instance(&engine, seed)?;
        if let Some(f) = opts.fault {
            engine = engine.with_fault(f);
        }
        let trace = engine.forward(&params, &q, &v, false, seed)?;
        let analytic = engine.backward(&params, &trace, label)?;
        let numeric = oracle::finite_diff_grad_with(&spec, &params, &q, &v, label, FD_STEP, Exec::Sequential)?;
        Ok(GradCase {
            seed,
            worst: oracle::worst_grad_diff(&analytic, &numeric),
            kink_margin: margin,
        })
    });
    Ok(GradReport {
        cases: cases.into_iter().collect::<Result<Vec<_>, _>>()?,
    })
}
