//! Executable forward/backward pass for a [`FusionSpec`].
//!
//! ```text
//! q̃ = Wq q,  ṽ = Wv v
//! T_r = Φ_r( f_q(M_r q̃) ⊙ f_v(N_r ṽ) )          for each branch r
//! z   = fold of the reduction plan over {T_r}
//! y   = Wo z + bo,  p = softmax(y)
//! ```
//!
//! [`Engine`] resolves parameter names to slots once; the free functions
//! are thin wrappers for one-off calls.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsl::{validate_spec, FusionSpec, PostFusion, ReduceOp, ReductionPlan};
use crate::exec::Exec;
use crate::params::{param_shapes, GradStore, ParamStore};
use crate::tensor::{matvec_into, matvec_t_acc, outer_acc, Activation, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("parameter store does not match spec: {0}")]
    Params(String),
    #[error("{what}: expected length {expected}, got {got}")]
    Input {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("reduction: {0}")]
    Reduce(String),
    #[error("trace does not belong to this spec")]
    Trace,
}

/// Deliberate defects for negative-control checks.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the gradient entering the first branch's question
    /// factor.
    NegateQuestionPath,
}

#[derive(Debug, Clone)]
struct PhiSlots {
    cfg: PostFusion,
    /// Every hidden layer uses the branch's question activation.
    act: Activation,
    layers: Vec<(usize, usize)>,
    out_w: usize,
    out_b: usize,
    /// `(layer, projection slot)`; `None` means identity addition.
    taps: Vec<(usize, Option<usize>)>,
}

#[derive(Debug, Clone)]
struct BranchSlots {
    m: usize,
    n: usize,
    f_q: Activation,
    f_v: Activation,
    phi: Option<PhiSlots>,
}

#[derive(Debug, Clone)]
struct Step {
    op: ReduceOp,
    members: Vec<usize>,
    squash: Option<Activation>,
}

#[derive(Debug, Clone)]
struct Layout {
    wq: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    branches: Vec<BranchSlots>,
    steps: Vec<Step>,
    shapes: Vec<(String, Vec<usize>)>,
}

/// A spec compiled against the parameter naming scheme.
#[derive(Debug, Clone)]
pub struct Engine {
    spec: FusionSpec,
    layout: Layout,
    fault: Option<Fault>,
}

#[derive(Debug, Clone)]
struct PhiTrace {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Layer outputs after activation and dropout.
    out: Vec<Vec<f64>>,
    /// Dropout multipliers per layer (0 or 1/(1−p)); empty when unused.
    masks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub pre_q: Vec<f64>,
    pub pre_v: Vec<f64>,
    pub act_q: Vec<f64>,
    pub act_v: Vec<f64>,
    pub hadamard: Vec<f64>,
    phi: Option<PhiTrace>,
    pub output: Vec<f64>,
}

/// Every intermediate needed by [`Engine::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub q_proj: Vec<f64>,
    pub v_proj: Vec<f64>,
    pub branches: Vec<BranchTrace>,
    /// Per branch, the value fed to its reduction step (squashed if the step
    /// has a squash).
    pub reduce_inputs: Vec<Vec<f64>>,
    /// Per step, the running value before the step is applied.
    pub running: Vec<Vec<f64>>,
    /// Per step, the folded group value.
    pub groups: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub train_mode: bool,
}

impl ForwardTrace {
    /// Index of the largest logit; ties go to the smallest index.
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Engine {
    pub fn new(spec: &FusionSpec) -> Result<Self, EngineError> {
        let violations = validate_spec(spec);
        if !violations.is_empty() {
            let msg = violations
                .iter()
                .map(|v| v.message.as_str())
                .collect::<Vec<_>>()
                .join("; ");
            return Err(EngineError::InvalidSpec(msg));
        }
        let shapes = param_shapes(spec);
        let slot = |name: &str| {
            shapes
                .binary_search_by(|(n, _)| n.as_str().cmp(name))
                .expect("name produced by param_shapes")
        };
        let branches = spec
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let r = i + 1;
                let phi = (b.post.layers > 0).then(|| {
                    let p = b.post;
                    PhiSlots {
                        cfg: p,
                        act: b.f_q,
                        layers: (1..=p.layers)
                            .map(|l| (slot(&format!("phi_{r}_{l}_W")), slot(&format!("phi_{r}_{l}_b"))))
                            .collect(),
                        out_w: slot(&format!("phi_{r}_out_W")),
                        out_b: slot(&format!("phi_{r}_out_b")),
                        taps: (1..=p.layers)
                            .filter(|l| l % p.skip == 0)
                            .map(|l| {
                                let proj = (p.hidden != spec.dims.t_o).then(|| slot(&format!("phi_{r}_skip_{l}_W")));
                                (l, proj)
                            })
                            .collect(),
                    }
                });
                BranchSlots {
                    m: slot(&format!("M_{r}")),
                    n: slot(&format!("N_{r}")),
                    f_q: b.f_q,
                    f_v: b.f_v,
                    phi,
                }
            })
            .collect();
        let steps = spec
            .plan
            .steps
            .iter()
            .map(|s| Step {
                op: s.op,
                members: s.members.iter().map(|id| spec.branch_index(id).unwrap()).collect(),
                squash: s.squash,
            })
            .collect();
        let layout = Layout {
            wq: slot("Wq"),
            wv: slot("Wv"),
            wo: slot("Wo"),
            bo: slot("bo"),
            branches,
            steps,
            shapes,
        };
        Ok(Self {
            spec: spec.clone(),
            layout,
            fault: None,
        })
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn spec(&self) -> &FusionSpec {
        &self.spec
    }

    pub fn check_params(&self, params: &ParamStore) -> Result<(), EngineError> {
        if params.len() != self.layout.shapes.len() {
            return Err(EngineError::Params(format!(
                "expected {} arrays, found {}",
                self.layout.shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, t)) in self.layout.shapes.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != t.shape() {
                return Err(EngineError::Params(format!(
                    "expected {name} {shape:?}, found {pn} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, q: &[f64], v: &[f64]) -> Result<(), EngineError> {
        let d = self.spec.dims;
        if q.len() != d.d_q {
            return Err(EngineError::Input {
                what: "q",
                expected: d.d_q,
                got: q.len(),
            });
        }
        if v.len() != d.d_v {
            return Err(EngineError::Input {
                what: "v",
                expected: d.d_v,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Full forward pass. `seed` drives the dropout masks and only matters
    /// in train mode.
    pub fn forward(
        &self,
        params: &ParamStore,
        q: &[f64],
        v: &[f64],
        train_mode: bool,
        seed: u64,
    ) -> Result<ForwardTrace, EngineError> {
        self.check_params(params)?;
        self.check_inputs(q, v)?;
        Ok(self.forward_unchecked(params, q, v, train_mode, seed))
    }

    pub(crate) fn forward_unchecked(
        &self,
        params: &ParamStore,
        q: &[f64],
        v: &[f64],
        train_mode: bool,
        seed: u64,
    ) -> ForwardTrace {
        let d = self.spec.dims;
        let lay = &self.layout;
        let mut q_proj = vec![0.0; d.t_q];
        matvec_into(params.slot(lay.wq), d.d_q, q, &mut q_proj);
        let mut v_proj = vec![0.0; d.t_v];
        matvec_into(params.slot(lay.wv), d.d_v, v, &mut v_proj);

        let mut rng = (train_mode
            && lay
                .branches
                .iter()
                .any(|b| b.phi.as_ref().is_some_and(|p| p.cfg.dropout > 0.0)))
        .then(|| ChaCha8Rng::seed_from_u64(seed));

        let branches: Vec<BranchTrace> = lay
            .branches
            .iter()
            .map(|b| branch_forward_slots(b, params, &q_proj, &v_proj, d.t_o, rng.as_mut()))
            .collect();

        let outputs: Vec<&[f64]> = branches.iter().map(|b| b.output.as_slice()).collect();
        let folded = fold_plan(&lay.steps, &outputs, d.t_o);

        let mut logits = vec![0.0; d.n_classes];
        matvec_into(params.slot(lay.wo), d.t_o, &folded.fused, &mut logits);
        for (y, b) in logits.iter_mut().zip(params.slot(lay.bo)) {
            *y += b;
        }
        let probs = softmax(&logits);
        ForwardTrace {
            q: q.to_vec(),
            v: v.to_vec(),
            q_proj,
            v_proj,
            branches,
            reduce_inputs: folded.inputs,
            running: folded.running,
            groups: folded.groups,
            fused: folded.fused,
            logits,
            probs,
            train_mode,
        }
    }

    /// Gradient of the cross-entropy loss at `label` with respect to every
    /// parameter.
    pub fn backward(&self, params: &ParamStore, trace: &ForwardTrace, label: usize) -> Result<GradStore, EngineError> {
        self.check_params(params)?;
        let d = self.spec.dims;
        if label >= d.n_classes {
            return Err(EngineError::Label {
                label,
                n_classes: d.n_classes,
            });
        }
        if trace.logits.len() != d.n_classes
            || trace.branches.len() != self.layout.branches.len()
            || trace.q.len() != d.d_q
            || trace.v.len() != d.d_v
            || trace.groups.len() != self.layout.steps.len()
        {
            return Err(EngineError::Trace);
        }
        let mut grads = params.zeros_like();
        self.backward_into(params, trace, label, &mut grads);
        Ok(grads)
    }

    pub(crate) fn backward_into(&self, params: &ParamStore, trace: &ForwardTrace, label: usize, grads: &mut GradStore) {
        let d = self.spec.dims;
        let lay = &self.layout;

        // softmax + cross-entropy
        let mut dy = trace.probs.clone();
        dy[label] -= 1.0;
        outer_acc(&dy, &trace.fused, grads.slot_mut(lay.wo));
        for (g, x) in grads.slot_mut(lay.bo).iter_mut().zip(&dy) {
            *g += x;
        }
        let mut dz = vec![0.0; d.t_o];
        matvec_t_acc(params.slot(lay.wo), d.t_o, &dy, &mut dz);

        // reduction plan, last step first
        let mut d_inputs = vec![vec![0.0; d.t_o]; lay.branches.len()];
        let mut d_run = dz;
        for (b, step) in lay.steps.iter().enumerate().rev() {
            let before = &trace.running[b];
            let group = &trace.groups[b];
            let d_group: Vec<f64> = match step.op {
                ReduceOp::Sum => d_run.clone(),
                ReduceOp::Prod => d_run.iter().zip(before).map(|(g, x)| g * x).collect(),
            };
            if step.op == ReduceOp::Prod {
                for (g, y) in d_run.iter_mut().zip(group) {
                    *g *= y;
                }
            }
            match step.op {
                ReduceOp::Sum => {
                    for &m in &step.members {
                        d_inputs[m].copy_from_slice(&d_group);
                    }
                }
                ReduceOp::Prod => {
                    let k = step.members.len();
                    for e in 0..d.t_o {
                        // product of all other members via prefix/suffix products
                        let mut suffix = vec![1.0; k + 1];
                        for j in (0..k).rev() {
                            suffix[j] = suffix[j + 1] * trace.reduce_inputs[step.members[j]][e];
                        }
                        let mut prefix = 1.0;
                        for (j, &m) in step.members.iter().enumerate() {
                            d_inputs[m][e] = d_group[e] * prefix * suffix[j + 1];
                            prefix *= trace.reduce_inputs[m][e];
                        }
                    }
                }
            }
            if let Some(sq) = step.squash {
                for &m in &step.members {
                    let out = &trace.branches[m].output;
                    for (g, &x) in d_inputs[m].iter_mut().zip(out) {
                        *g *= sq.derivative(x);
                    }
                }
            }
        }

        // branches
        let mut dq_proj = vec![0.0; d.t_q];
        let mut dv_proj = vec![0.0; d.t_v];
        for (r, (slots, bt)) in lay.branches.iter().zip(&trace.branches).enumerate() {
            let d_had = match (&slots.phi, &bt.phi) {
                (Some(ps), Some(pt)) => phi_backward(ps, pt, params, &bt.hadamard, &d_inputs[r], d.t_o, grads),
                _ => d_inputs[r].clone(),
            };
            let mut d_pre_q: Vec<f64> = d_had
                .iter()
                .zip(&bt.act_v)
                .zip(&bt.pre_q)
                .map(|((g, c), &x)| g * c * slots.f_q.derivative(x))
                .collect();
            let d_pre_v: Vec<f64> = d_had
                .iter()
                .zip(&bt.act_q)
                .zip(&bt.pre_v)
                .map(|((g, a), &x)| g * a * slots.f_v.derivative(x))
                .collect();
            if r == 0 && self.fault == Some(Fault::NegateQuestionPath) {
                d_pre_q.iter_mut().for_each(|g| *g = -*g);
            }
            outer_acc(&d_pre_q, &trace.q_proj, grads.slot_mut(slots.m));
            outer_acc(&d_pre_v, &trace.v_proj, grads.slot_mut(slots.n));
            matvec_t_acc(params.slot(slots.m), d.t_q, &d_pre_q, &mut dq_proj);
            matvec_t_acc(params.slot(slots.n), d.t_v, &d_pre_v, &mut dv_proj);
        }
        outer_acc(&dq_proj, &trace.q, grads.slot_mut(lay.wq));
        outer_acc(&dv_proj, &trace.v, grads.slot_mut(lay.wv));
    }

    /// Smallest |pre-activation| feeding a leaky ReLU or SeLU anywhere in the
    /// trace (branch factors, Φ layers, squashes); `inf` when none do.
    /// Finite differences are only trustworthy when this is well above the
    /// perturbation size.
    pub fn kink_margin(&self, trace: &ForwardTrace) -> f64 {
        fn kinked(a: Activation) -> bool {
            matches!(a, Activation::LeakyRelu { .. } | Activation::Selu)
        }
        fn min_abs(xs: &[f64]) -> f64 {
            xs.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
        }
        let mut margin = f64::INFINITY;
        for (slots, bt) in self.layout.branches.iter().zip(&trace.branches) {
            if kinked(slots.f_q) {
                margin = margin.min(min_abs(&bt.pre_q));
                if let Some(pt) = &bt.phi {
                    for pre in &pt.pre {
                        margin = margin.min(min_abs(pre));
                    }
                }
            }
            if kinked(slots.f_v) {
                margin = margin.min(min_abs(&bt.pre_v));
            }
        }
        for step in &self.layout.steps {
            if step.squash.is_some_and(kinked) {
                for &m in &step.members {
                    margin = margin.min(min_abs(&trace.branches[m].output));
                }
            }
        }
        margin
    }

    /// Forward, loss and backward for one labelled example.
    pub fn loss_and_grad(
        &self,
        params: &ParamStore,
        q: &[f64],
        v: &[f64],
        label: usize,
        train_mode: bool,
        seed: u64,
    ) -> Result<(f64, ForwardTrace, GradStore), EngineError> {
        let trace = self.forward(params, q, v, train_mode, seed)?;
        let loss = loss_xent(&trace, label)?;
        let grads = self.backward(params, &trace, label)?;
        Ok((loss, trace, grads))
    }

    /// Cross-entropy with training mode off; used by finite differences.
    pub fn eval_loss(&self, params: &ParamStore, q: &[f64], v: &[f64], label: usize) -> Result<f64, EngineError> {
        let trace = self.forward(params, q, v, false, 0)?;
        loss_xent(&trace, label)
    }

    /// Mean gradient over a batch. Per-example work may run in parallel but
    /// accumulation is in index order, so the result is bitwise independent
    /// of `exec`. Returns `(mean grads, summed loss, correct predictions)`.
    pub fn batch_grad<'a>(
        &self,
        params: &ParamStore,
        batch: &[BatchItem<'a>],
        train_mode: bool,
        exec: Exec,
    ) -> Result<(GradStore, f64, usize), EngineError> {
        self.check_params(params)?;
        for item in batch {
            self.check_inputs(item.q, item.v)?;
            if item.label >= self.spec.dims.n_classes {
                return Err(EngineError::Label {
                    label: item.label,
                    n_classes: self.spec.dims.n_classes,
                });
            }
        }
        const WINDOW: usize = 64;
        let mut total = params.zeros_like();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for window in batch.chunks(WINDOW) {
            let results = exec.map_slice(window, |item| {
                let trace = self.forward_unchecked(params, item.q, item.v, train_mode, item.seed);
                let loss = logsumexp(&trace.logits) - trace.logits[item.label];
                let mut g = params.zeros_like();
                self.backward_into(params, &trace, item.label, &mut g);
                (loss, trace.predicted() == item.label, g)
            });
            for (loss, hit, g) in results {
                loss_sum += loss;
                correct += usize::from(hit);
                total.add_assign(&g);
            }
        }
        if !batch.is_empty() {
            total.scale(1.0 / batch.len() as f64);
        }
        Ok((total, loss_sum, correct))
    }
}

/// One example in a batch; `seed` drives its dropout masks.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub q: &'a [f64],
    pub v: &'a [f64],
    pub label: usize,
    pub seed: u64,
}

fn branch_forward_slots(
    b: &BranchSlots,
    params: &ParamStore,
    q_proj: &[f64],
    v_proj: &[f64],
    t_o: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> BranchTrace {
    let mut pre_q = vec![0.0; t_o];
    matvec_into(params.slot(b.m), q_proj.len(), q_proj, &mut pre_q);
    let mut pre_v = vec![0.0; t_o];
    matvec_into(params.slot(b.n), v_proj.len(), v_proj, &mut pre_v);
    let act_q: Vec<f64> = pre_q.iter().map(|&x| b.f_q.eval(x)).collect();
    let act_v: Vec<f64> = pre_v.iter().map(|&x| b.f_v.eval(x)).collect();
    let hadamard: Vec<f64> = act_q.iter().zip(&act_v).map(|(a, c)| a * c).collect();
    let (phi, output) = match &b.phi {
        Some(ps) => {
            let (pt, out) = phi_forward(ps, params, &hadamard, t_o, rng);
            (Some(pt), out)
        }
        None => (None, hadamard.clone()),
    };
    BranchTrace {
        pre_q,
        pre_v,
        act_q,
        act_v,
        hadamard,
        phi,
        output,
    }
}

fn phi_forward(
    ps: &PhiSlots,
    params: &ParamStore,
    x: &[f64],
    t_o: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (PhiTrace, Vec<f64>) {
    let cfg = ps.cfg;
    let act = ps.act;
    let mut pre = Vec::with_capacity(cfg.layers);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.layers);
    let mut masks = Vec::new();
    for (l, &(w, b)) in ps.layers.iter().enumerate() {
        let input: &[f64] = if l == 0 { x } else { &out[l - 1] };
        let mut z = vec![0.0; cfg.hidden];
        matvec_into(params.slot(w), input.len(), input, &mut z);
        for (zi, bi) in z.iter_mut().zip(params.slot(b)) {
            *zi += bi;
        }
        let mut h: Vec<f64> = z.iter().map(|&s| act.eval(s)).collect();
        if cfg.dropout > 0.0 {
            if let Some(rng) = rng.as_deref_mut() {
                let keep = 1.0 / (1.0 - cfg.dropout);
                let mask: Vec<f64> = (0..cfg.hidden)
                    .map(|_| if rng.random::<f64>() < cfg.dropout { 0.0 } else { keep })
                    .collect();
                for (hi, m) in h.iter_mut().zip(&mask) {
                    *hi *= m;
                }
                masks.push(mask);
            }
        }
        pre.push(z);
        out.push(h);
    }
    let mut y = vec![0.0; t_o];
    matvec_into(params.slot(ps.out_w), cfg.hidden, &out[cfg.layers - 1], &mut y);
    for ((yi, bi), xi) in y.iter_mut().zip(params.slot(ps.out_b)).zip(x) {
        *yi += bi + xi;
    }
    for &(l, proj) in &ps.taps {
        let h = &out[l - 1];
        match proj {
            Some(p) => {
                let mut t = vec![0.0; t_o];
                matvec_into(params.slot(p), cfg.hidden, h, &mut t);
                y.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
            }
            None => y.iter_mut().zip(h).for_each(|(a, b)| *a += b),
        }
    }
    (PhiTrace { pre, out, masks }, y)
}

/// Returns the gradient with respect to Φ's input.
fn phi_backward(
    ps: &PhiSlots,
    pt: &PhiTrace,
    params: &ParamStore,
    x: &[f64],
    d_out: &[f64],
    t_o: usize,
    grads: &mut GradStore,
) -> Vec<f64> {
    let cfg = ps.cfg;
    let last = cfg.layers - 1;
    let mut dx = d_out.to_vec();
    let mut dh: Vec<Vec<f64>> = vec![vec![0.0; cfg.hidden]; cfg.layers];

    outer_acc(d_out, &pt.out[last], grads.slot_mut(ps.out_w));
    for (g, d) in grads.slot_mut(ps.out_b).iter_mut().zip(d_out) {
        *g += d;
    }
    matvec_t_acc(params.slot(ps.out_w), cfg.hidden, d_out, &mut dh[last]);
    for &(l, proj) in &ps.taps {
        match proj {
            Some(p) => {
                outer_acc(d_out, &pt.out[l - 1], grads.slot_mut(p));
                matvec_t_acc(params.slot(p), cfg.hidden, d_out, &mut dh[l - 1]);
            }
            None => dh[l - 1].iter_mut().zip(d_out).for_each(|(a, b)| *a += b),
        }
    }
    debug_assert_eq!(d_out.len(), t_o);

    let act = ps.act;
    for l in (0..cfg.layers).rev() {
        let mut dz = std::mem::take(&mut dh[l]);
        if let Some(mask) = pt.masks.get(l) {
            dz.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        dz.iter_mut()
            .zip(&pt.pre[l])
            .for_each(|(g, &z)| *g *= act.derivative(z));
        let (w, b) = ps.layers[l];
        let input: &[f64] = if l == 0 { x } else { &pt.out[l - 1] };
        outer_acc(&dz, input, grads.slot_mut(w));
        for (g, d) in grads.slot_mut(b).iter_mut().zip(&dz) {
            *g += d;
        }
        if l == 0 {
            matvec_t_acc(params.slot(w), x.len(), &dz, &mut dx);
        } else {
            matvec_t_acc(params.slot(w), cfg.hidden, &dz, &mut dh[l - 1]);
        }
    }
    dx
}

struct Folded {
    inputs: Vec<Vec<f64>>,
    running: Vec<Vec<f64>>,
    groups: Vec<Vec<f64>>,
    fused: Vec<f64>,
}

fn fold_plan(steps: &[Step], outputs: &[&[f64]], len: usize) -> Folded {
    let mut inputs: Vec<Vec<f64>> = vec![Vec::new(); outputs.len()];
    let mut running = Vec::with_capacity(steps.len());
    let mut groups = Vec::with_capacity(steps.len());
    let mut acc = vec![steps[0].op.identity(); len];
    for step in steps {
        let mut group = vec![step.op.identity(); len];
        for &m in &step.members {
            let x: Vec<f64> = match step.squash {
                Some(sq) => outputs[m].iter().map(|&t| sq.eval(t)).collect(),
                None => outputs[m].to_vec(),
            };
            for (g, &xi) in group.iter_mut().zip(&x) {
                *g = step.op.apply(*g, xi);
            }
            inputs[m] = x;
        }
        running.push(acc.clone());
        for (a, &g) in acc.iter_mut().zip(&group) {
            *a = step.op.apply(*a, g);
        }
        groups.push(group);
    }
    Folded {
        inputs,
        running,
        groups,
        fused: acc,
    }
}

/// Fold branch outputs through the plan: start from the identity of the
/// first operator; for each step fold its (optionally squashed) members into
/// a fresh identity with the step's operator, then combine that group into
/// the running value with the same operator.
pub fn reduce_branches(plan: &ReductionPlan, outputs: &BTreeMap<String, Tensor>) -> Result<Tensor, EngineError> {
    if plan.steps.is_empty() {
        return Err(EngineError::Reduce("plan has no steps".into()));
    }
    let ids: Vec<&String> = outputs.keys().collect();
    let mut covered = vec![false; ids.len()];
    let mut steps = Vec::with_capacity(plan.steps.len());
    for s in &plan.steps {
        let mut members = Vec::with_capacity(s.members.len());
        for m in &s.members {
            let i = ids
                .binary_search(&m)
                .map_err(|_| EngineError::Reduce(format!("no output for branch {m}")))?;
            if std::mem::replace(&mut covered[i], true) {
                return Err(EngineError::Reduce(format!("branch {m} used more than once")));
            }
            members.push(i);
        }
        if members.is_empty() {
            return Err(EngineError::Reduce("empty step".into()));
        }
        steps.push(Step {
            op: s.op,
            members,
            squash: s.squash,
        });
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(EngineError::Reduce(format!("plan does not cover output {}", ids[i])));
    }
    let tensors: Vec<&Tensor> = outputs.values().collect();
    let shape = tensors[0].shape().to_vec();
    if tensors.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(EngineError::Reduce("branch outputs differ in shape".into()));
    }
    let slices: Vec<&[f64]> = tensors.iter().map(|t| t.data()).collect();
    let folded = fold_plan(&steps, &slices, tensors[0].len());
    Ok(Tensor::from_parts(shape, folded.fused))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&y| (y - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn logsumexp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&y| (y - max).exp()).sum::<f64>().ln()
}

/// `−log p[label]` via log-sum-exp.
pub fn loss_xent(trace: &ForwardTrace, label: usize) -> Result<f64, EngineError> {
    if label >= trace.logits.len() {
        return Err(EngineError::Label {
            label,
            n_classes: trace.logits.len(),
        });
    }
    Ok(logsumexp(&trace.logits) - trace.logits[label])
}

pub fn forward(
    spec: &FusionSpec,
    params: &ParamStore,
    q: &Tensor,
    v: &Tensor,
    train_mode: bool,
    seed: u64,
) -> Result<ForwardTrace, EngineError> {
    Engine::new(spec)?.forward(params, q.data(), v.data(), train_mode, seed)
}

pub fn backward(
    spec: &FusionSpec,
    params: &ParamStore,
    trace: &ForwardTrace,
    label: usize,
) -> Result<GradStore, EngineError> {
    Engine::new(spec)?.backward(params, trace, label)
}

/// One branch in isolation: `Φ_r(f_q(M_r q̃) ⊙ f_v(N_r ṽ))` from already
/// projected inputs. Returns the output and the branch trace. Eval mode.
pub fn branch_forward(
    spec: &FusionSpec,
    params: &ParamStore,
    branch: &str,
    q_proj: &Tensor,
    v_proj: &Tensor,
) -> Result<(Tensor, BranchTrace), EngineError> {
    let engine = Engine::new(spec)?;
    engine.check_params(params)?;
    let r = spec
        .branch_index(branch)
        .ok_or_else(|| EngineError::InvalidSpec(format!("no branch {branch}")))?;
    let d = spec.dims;
    if q_proj.len() != d.t_q {
        return Err(EngineError::Input {
            what: "q_proj",
            expected: d.t_q,
            got: q_proj.len(),
        });
    }
    if v_proj.len() != d.t_v {
        return Err(EngineError::Input {
            what: "v_proj",
            expected: d.t_v,
            got: v_proj.len(),
        });
    }
    let bt = branch_forward_slots(
        &engine.layout.branches[r],
        params,
        q_proj.data(),
        v_proj.data(),
        d.t_o,
        None,
    );
    Ok((Tensor::vector(bt.output.clone()), bt))
}

/// Φ applied to `x` using the named weights of branch `branch` (eval mode).
pub fn post_fusion_forward(
    spec: &FusionSpec,
    params: &ParamStore,
    branch: &str,
    x: &Tensor,
) -> Result<Tensor, EngineError> {
    let engine = Engine::new(spec)?;
    engine.check_params(params)?;
    let r = spec
        .branch_index(branch)
        .ok_or_else(|| EngineError::InvalidSpec(format!("no branch {branch}")))?;
    if x.len() != spec.dims.t_o {
        return Err(EngineError::Input {
            what: "x",
            expected: spec.dims.t_o,
            got: x.len(),
        });
    }
    let slots = &engine.layout.branches[r];
    match &slots.phi {
        None => Ok(x.clone()),
        Some(ps) => {
            let (_, y) = phi_forward(ps, params, x.data(), spec.dims.t_o, None);
            Ok(Tensor::vector(y))
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::dsl::{preset, BranchSpec, Dims, ReductionStep};
    use crate::oracle::finite_diff_grad;
    use crate::params::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn single_branch(f_q: Activation, f_v: Activation, dims: Dims) -> FusionSpec {
        FusionSpec {
            dims,
            branches: vec![BranchSpec::new("b1", f_q, f_v)],
            plan: ReductionPlan {
                steps: vec![ReductionStep::new(ReduceOp::Sum, ["b1"])],
            },
            seed_hint: None,
        }
    }

    #[test]
    fn branch_reduces_to_hadamard() {
        let spec = single_branch(Activation::Identity, Activation::Identity, Dims::new(2, 2, 2, 2, 2, 2));
        let mut p = init_params(&spec, 0);
        p.set("M_1", Tensor::identity(2)).unwrap();
        p.set("N_1", Tensor::identity(2)).unwrap();
        let (out, _) = branch_forward(
            &spec,
            &p,
            "b1",
            &Tensor::vector(vec![1.0, 2.0]),
            &Tensor::vector(vec![3.0, 4.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0, 8.0]);
    }

    #[test]
    fn sigmoid_of_zero_halves_the_other_factor() {
        let spec = single_branch(Activation::Sigmoid, Activation::Tanh, Dims::new(2, 2, 2, 3, 3, 2));
        let mut p = init_params(&spec, 1);
        p.set("M_1", Tensor::zeros(&[3, 2])).unwrap();
        let vt = Tensor::vector(vec![0.3, -1.2, 0.8]);
        let (out, bt) = branch_forward(&spec, &p, "b1", &Tensor::vector(vec![1.0, 2.0]), &vt).unwrap();
        for (o, pv) in out.data().iter().zip(&bt.pre_v) {
            assert_eq!(*o, 0.5 * pv.tanh());
        }
    }

    #[test]
    fn branch_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for seed in 0..20 {
            let dims = Dims::new(3, 3, 4, 5, 3, 2);
            let f_q = Activation::ALL[seed % 5];
            let f_v = Activation::ALL[(seed + 2) % 5];
            let spec = single_branch(f_q, f_v, dims);
            let p = init_params(&spec, seed as u64);
            let qt = randn(&mut rng, 4);
            let vt = randn(&mut rng, 5);
            let (out, _) = branch_forward(
                &spec,
                &p,
                "b1",
                &Tensor::vector(qt.clone()),
                &Tensor::vector(vt.clone()),
            )
            .unwrap();
            let m = p.get("M_1").unwrap();
            let n = p.get("N_1").unwrap();
            for k in 0..3 {
                let mut a = 0.0;
                for i in 0..4 {
                    a += m.get(&[k, i]) * qt[i];
                }
                let mut c = 0.0;
                for j in 0..5 {
                    c += n.get(&[k, j]) * vt[j];
                }
                let expect = f_q.eval(a) * f_v.eval(c);
                assert!(rel(out.data()[k], expect) <= 1e-12);
            }
        }
    }

    fn mlp_spec(layers: usize, hidden: usize, act: Activation, t_o: usize) -> FusionSpec {
        let mut s = single_branch(act, Activation::Identity, Dims::new(2, 2, 2, 2, t_o, 2));
        s.branches[0].post = PostFusion::mlp(layers, hidden);
        s
    }

    #[test]
    fn phi_identity_and_zero_weights() {
        let spec = single_branch(Activation::Tanh, Activation::Selu, Dims::new(2, 2, 2, 2, 3, 2));
        let p = init_params(&spec, 0);
        let x = Tensor::vector(vec![0.1, -2.0, 3.5]);
        let y = post_fusion_forward(&spec, &p, "b1", &x).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let spec = mlp_spec(3, 4, Activation::Identity, 3);
        let mut p = init_params(&spec, 0);
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let y = post_fusion_forward(&spec, &p, "b1", &x).unwrap();
        assert_eq!(y, x);
    }

    /// Layer-by-layer loop transcription of Φ.
    fn phi_oracle(p: &ParamStore, cfg: PostFusion, act: Activation, x: &[f64]) -> Vec<f64> {
        let t_o = x.len();
        let mut h = x.to_vec();
        let mut taps = Vec::new();
        for l in 1..=cfg.layers {
            let w = p.get(&format!("phi_1_{l}_W")).unwrap();
            let b = p.get(&format!("phi_1_{l}_b")).unwrap();
            let mut next = vec![0.0; cfg.hidden];
            for j in 0..cfg.hidden {
                let mut s = b.data()[j];
                for i in 0..h.len() {
                    s += w.get(&[j, i]) * h[i];
                }
                next[j] = act.eval(s);
            }
            h = next;
            if l % cfg.skip == 0 {
                taps.push((l, h.clone()));
            }
        }
        let wo = p.get("phi_1_out_W").unwrap();
        let bo = p.get("phi_1_out_b").unwrap();
        let mut y = vec![0.0; t_o];
        for k in 0..t_o {
            let mut s = bo.data()[k] + x[k];
            for j in 0..cfg.hidden {
                s += wo.get(&[k, j]) * h[j];
            }
            for (l, tap) in &taps {
                if cfg.hidden == t_o {
                    s += tap[k];
                } else {
                    let pw = p.get(&format!("phi_1_skip_{l}_W")).unwrap();
                    for j in 0..cfg.hidden {
                        s += pw.get(&[k, j]) * tap[j];
                    }
                }
            }
            y[k] = s;
        }
        y
    }

    #[test]
    fn phi_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (layers, hidden, t_o) in [(6, 128, 4), (3, 4, 4), (4, 5, 3), (1, 2, 2)] {
            let spec = mlp_spec(layers, hidden, Activation::Selu, t_o);
            let mut p = init_params(&spec, layers as u64);
            crate::checks::randomize_biases(&mut p, &mut rng);
            let x = randn(&mut rng, t_o);
            let y = post_fusion_forward(&spec, &p, "b1", &Tensor::vector(x.clone())).unwrap();
            let expect = phi_oracle(&p, spec.branches[0].post, Activation::Selu, &x);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!(rel(*a, *b) <= 1e-12, "{a} vs {b}");
            }
        }
    }

    fn outs(pairs: &[(&str, &[f64])]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::vector(v.to_vec())))
            .collect()
    }

    #[test]
    fn reduction_examples() {
        let o = outs(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.0])]);
        let plan = ReductionPlan {
            steps: vec![ReductionStep::new(ReduceOp::Sum, ["a", "b"])],
        };
        assert_eq!(reduce_branches(&plan, &o).unwrap().data(), &[4.0, 6.0]);
        let plan = ReductionPlan {
            steps: vec![
                ReductionStep::new(ReduceOp::Sum, ["a"]),
                ReductionStep::new(ReduceOp::Prod, ["b"]),
            ],
        };
        assert_eq!(reduce_branches(&plan, &o).unwrap().data(), &[3.0, 8.0]);

        let bad = ReductionPlan {
            steps: vec![ReductionStep::new(ReduceOp::Sum, ["a"])],
        };
        assert!(reduce_branches(&bad, &o).is_err());
    }

    #[test]
    fn feature_gating_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let names = ["a", "b", "c", "d", "e"];
        for _ in 0..50 {
            let vals: Vec<Vec<f64>> = (0..5).map(|_| randn(&mut rng, 6)).collect();
            let o: BTreeMap<String, Tensor> = names
                .iter()
                .zip(&vals)
                .map(|(n, v)| (n.to_string(), Tensor::vector(v.clone())))
                .collect();
            let plan = ReductionPlan {
                steps: vec![
                    ReductionStep::new(ReduceOp::Sum, ["a", "b", "c", "d"]),
                    ReductionStep::new(ReduceOp::Prod, ["e"]).with_squash(Activation::Sigmoid),
                ],
            };
            let got = reduce_branches(&plan, &o).unwrap();
            for e in 0..6 {
                let s = vals[0][e] + vals[1][e] + vals[2][e] + vals[3][e];
                let gate = 1.0 / (1.0 + (-vals[4][e]).exp());
                assert!(rel(got.data()[e], s * gate) <= 1e-14);
            }
        }
    }

    #[test]
    fn sum_order_invariance_and_mixed_order_sensitivity() {
        let dims = Dims::new(4, 4, 3, 3, 3, 4);
        let spec = preset("ne", dims, 4).unwrap();
        let mut permuted = spec.clone();
        permuted.plan.steps[0].members.reverse();
        let p = init_params(&spec, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randn(&mut rng, 4);
        let v = randn(&mut rng, 4);
        let a = Engine::new(&spec).unwrap().forward(&p, &q, &v, false, 0).unwrap();
        let b = Engine::new(&permuted).unwrap().forward(&p, &q, &v, false, 0).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!(rel(*x, *y) <= 1e-12);
        }

        // [sum(a), prod(b)] = a ⊙ b but [prod(b), sum(a)] = b + a
        let o = outs(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.0])]);
        let one = ReductionPlan {
            steps: vec![
                ReductionStep::new(ReduceOp::Sum, ["a"]),
                ReductionStep::new(ReduceOp::Prod, ["b"]),
            ],
        };
        let two = ReductionPlan {
            steps: vec![
                ReductionStep::new(ReduceOp::Prod, ["b"]),
                ReductionStep::new(ReduceOp::Sum, ["a"]),
            ],
        };
        assert_eq!(reduce_branches(&one, &o).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(reduce_branches(&two, &o).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let dims = Dims::new(5, 4, 3, 3, 2, 7);
        for name in crate::dsl::PRESET_NAMES {
            let mut spec = preset(name, dims, 3).unwrap();
            for b in &mut spec.branches {
                b.post.hidden = b.post.hidden.min(6);
            }
            let p = init_params(&spec, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let tr = forward(
                &spec,
                &p,
                &Tensor::vector(randn(&mut rng, 5)),
                &Tensor::vector(randn(&mut rng, 4)),
                false,
                0,
            )
            .unwrap();
            assert_eq!(tr.logits.len(), 7);
            assert!((tr.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let spec = preset("mlb", dims, 1).unwrap();
        let p = init_params(&spec, 2);
        let err = forward(
            &spec,
            &p,
            &Tensor::vector(vec![1.0; 4]),
            &Tensor::vector(vec![1.0; 4]),
            false,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::Input { what: "q", .. }));
    }

    #[test]
    fn cross_entropy_values() {
        let mk = |logits: Vec<f64>| ForwardTrace {
            q: vec![],
            v: vec![],
            q_proj: vec![],
            v_proj: vec![],
            branches: vec![],
            reduce_inputs: vec![],
            running: vec![],
            groups: vec![],
            fused: vec![],
            probs: softmax(&logits),
            logits,
            train_mode: false,
        };
        let uniform = mk(vec![0.7; 6]);
        assert!((loss_xent(&uniform, 2).unwrap() - 6f64.ln()).abs() < 1e-15);
        let sat = mk(vec![0.0, 1e6, 0.0]);
        assert!(loss_xent(&sat, 1).unwrap().abs() < 1e-12);
        assert!(loss_xent(&sat, 3).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let logits = randn(&mut rng, 5).into_iter().map(|x| 3.0 * x).collect::<Vec<_>>();
            let naive = {
                let z: f64 = logits.iter().map(|y| y.exp()).sum();
                -(logits[1].exp() / z).ln()
            };
            assert!((loss_xent(&mk(logits), 1).unwrap() - naive).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_hot_probabilities_give_zero_gradient() {
        let spec = preset("ne_fg", Dims::new(3, 3, 2, 2, 2, 3), 3).unwrap();
        let mut p = init_params(&spec, 3);
        p.set("Wo", Tensor::zeros(&[3, 2])).unwrap();
        p.set("bo", Tensor::vector(vec![0.0, 1e6, 0.0])).unwrap();
        let e = Engine::new(&spec).unwrap();
        let tr = e.forward(&p, &[1.0, -1.0, 0.5], &[0.2, 0.3, -0.4], false, 0).unwrap();
        assert_eq!(tr.probs, vec![0.0, 1.0, 0.0]);
        let g = e.backward(&p, &tr, 1).unwrap();
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn linear_head_gradient() {
        let spec = preset("mlb", Dims::new(3, 4, 3, 3, 3, 4), 1).unwrap();
        let p = init_params(&spec, 6);
        let e = Engine::new(&spec).unwrap();
        let tr = e
            .forward(&p, &[0.3, -0.2, 1.0], &[1.0, 0.5, -0.5, 2.0], false, 0)
            .unwrap();
        let g = e.backward(&p, &tr, 2).unwrap();
        let mut dy = tr.probs.clone();
        dy[2] -= 1.0;
        let expect = crate::tensor::outer(&Tensor::vector(dy), &Tensor::vector(tr.fused.clone())).unwrap();
        assert_eq!(g.get("Wo").unwrap(), &expect);
    }

    #[test]
    fn dropout_gradient_matches_fixed_mask_differences() {
        let mut spec = preset("ne", Dims::new(3, 3, 3, 3, 3, 3), 2).unwrap();
        for b in &mut spec.branches {
            b.post = PostFusion {
                layers: 3,
                hidden: 4,
                skip: 2,
                dropout: 0.3,
            };
        }
        let e = Engine::new(&spec).unwrap();
        let p = init_params(&spec, 1);
        let seed = 99;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, v, tr) = loop {
            let (q, v) = (randn(&mut rng, 3), randn(&mut rng, 3));
            let tr = e.forward(&p, &q, &v, true, seed).unwrap();
            if e.kink_margin(&tr) > 1e-3 {
                break (q, v, tr);
            }
        };
        let g = e.backward(&p, &tr, 0).unwrap();
        let loss = |p: &ParamStore| loss_xent(&e.forward(p, &q, &v, true, seed).unwrap(), 0).unwrap();
        for name in ["phi_1_2_W", "M_2", "Wq"] {
            for i in 0..3 {
                let mut pp = p.clone();
                let h = 1e-6;
                pp.get_mut(name).unwrap().data_mut()[i] += h;
                let up = loss(&pp);
                pp.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
                let down = loss(&pp);
                let fd = (up - down) / (2.0 * h);
                let an = g.get(name).unwrap().data()[i];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{name}[{i}] {an} vs {fd}");
            }
        }
        // eval mode never drops
        let a = e.forward(&p, &q, &v, false, 1).unwrap();
        let b = e.forward(&p, &q, &v, false, 2).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn analytic_matches_finite_differences_on_presets() {
        let dims = Dims::new(3, 4, 3, 2, 3, 3);
        for name in crate::dsl::PRESET_NAMES {
            let mut spec = preset(name, dims, 3).unwrap();
            for b in &mut spec.branches {
                b.post.hidden = b.post.hidden.min(4);
            }
            let e = Engine::new(&spec).unwrap();
            let (p, q, v, label, _) = crate::checks::grad_instance(&e, 3).unwrap();
            let tr = e.forward(&p, &q, &v, false, 0).unwrap();
            let g = e.backward(&p, &tr, label).unwrap();
            let fd = finite_diff_grad(&spec, &p, &q, &v, label, 1e-5).unwrap();
            let worst = crate::oracle::worst_grad_diff(&g, &fd).unwrap();
            assert!(worst.rel_err <= 1e-4, "{name}: {worst:?}");
        }
    }

    #[test]
    fn bitwise_deterministic() {
        let mut spec = preset("ne_fg_mlp6", Dims::new(3, 3, 3, 3, 3, 3), 3).unwrap();
        for b in &mut spec.branches {
            b.post.hidden = 5;
            b.post.dropout = 0.2;
        }
        let e = Engine::new(&spec).unwrap();
        let p = init_params(&spec, 0);
        let run = || {
            let tr = e.forward(&p, &[1.0, 2.0, 3.0], &[-1.0, 0.0, 1.0], true, 17).unwrap();
            (tr.logits.clone(), e.backward(&p, &tr, 1).unwrap().to_bytes())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_grad_is_mean_and_exec_independent() {
        let spec = preset("ne_ps", Dims::new(4, 4, 3, 3, 3, 3), 3).unwrap();
        let e = Engine::new(&spec).unwrap();
        let p = init_params(&spec, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..150)
            .map(|i| (randn(&mut rng, 4), randn(&mut rng, 4), i % 3))
            .collect();
        let batch: Vec<BatchItem> = data
            .iter()
            .enumerate()
            .map(|(i, (q, v, l))| BatchItem {
                q,
                v,
                label: *l,
                seed: i as u64,
            })
            .collect();
        let (gs, ls, cs) = e.batch_grad(&p, &batch, false, Exec::Sequential).unwrap();
        let (gp, lp, cp) = e.batch_grad(&p, &batch, false, Exec::Parallel).unwrap();
        assert_eq!(gs.to_bytes(), gp.to_bytes());
        assert_eq!((ls.to_bits(), cs), (lp.to_bits(), cp));

        let mut manual = p.zeros_like();
        for (q, v, l) in &data {
            let (_, _, g) = e.loss_and_grad(&p, q, v, *l, false, 0).unwrap();
            manual.add_assign(&g);
        }
        manual.scale(1.0 / 150.0);
        assert_eq!(manual.to_bytes(), gs.to_bytes());
    }
}
