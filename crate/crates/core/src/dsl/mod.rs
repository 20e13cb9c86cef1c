//! Fusion-operator specifications: the domain model, its validator, a small
//! block-structured text syntax, and the built-in presets.
//!
//! A [`FusionSpec`] describes one member of the operator family: shared input
//! projections, `R` branches each computing
//! `Φ_r(f_q(M_r q̃) ⊙ f_v(N_r ṽ))`, and an ordered reduction plan that
//! partitions the branch outputs into groups folded with `sum` or `prod`.

mod parse;
mod presets;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Activation;

pub use parse::{parse_spec, serialize_spec, ParseError, Pos, SpecError};
pub use presets::{builtin_presets, full_dims, preset, PRESET_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d_q: usize,
    pub d_v: usize,
    pub t_q: usize,
    pub t_v: usize,
    pub t_o: usize,
    pub n_classes: usize,
}

impl Dims {
    pub fn new(d_q: usize, d_v: usize, t_q: usize, t_v: usize, t_o: usize, n_classes: usize) -> Self {
        Self {
            d_q,
            d_v,
            t_q,
            t_v,
            t_o,
            n_classes,
        }
    }

    /// `(grammar key, value)` pairs in grammar order.
    pub fn fields(&self) -> [(&'static str, usize); 6] {
        [
            ("dq", self.d_q),
            ("dv", self.d_v),
            ("tq", self.t_q),
            ("tv", self.t_v),
            ("to", self.t_o),
            ("classes", self.n_classes),
        ]
    }
}

/// Post-fusion network Φ_r. `layers == 0` makes Φ the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostFusion {
    pub layers: usize,
    pub hidden: usize,
    pub skip: usize,
    pub dropout: f64,
}

pub const DEFAULT_SKIP_PERIOD: usize = 3;

impl Default for PostFusion {
    fn default() -> Self {
        Self {
            layers: 0,
            hidden: 0,
            skip: DEFAULT_SKIP_PERIOD,
            dropout: 0.0,
        }
    }
}

impl PostFusion {
    pub fn mlp(layers: usize, hidden: usize) -> Self {
        Self {
            layers,
            hidden,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.layers == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub id: String,
    pub f_q: Activation,
    pub f_v: Activation,
    pub post: PostFusion,
}

impl BranchSpec {
    pub fn new(id: impl Into<String>, f_q: Activation, f_v: Activation) -> Self {
        Self {
            id: id.into(),
            f_q,
            f_v,
            post: PostFusion::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReduceOp {
    Sum,
    Prod,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Prod => "prod",
        }
    }

    /// Neutral element of the operator.
    pub fn identity(self) -> f64 {
        match self {
            ReduceOp::Sum => 0.0,
            ReduceOp::Prod => 1.0,
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ReduceOp::Sum => a + b,
            ReduceOp::Prod => a * b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionStep {
    pub op: ReduceOp,
    pub members: Vec<String>,
    /// Applied to each member's output before folding.
    pub squash: Option<Activation>,
}

impl ReductionStep {
    pub fn new<S: Into<String>>(op: ReduceOp, members: impl IntoIterator<Item = S>) -> Self {
        Self {
            op,
            members: members.into_iter().map(Into::into).collect(),
            squash: None,
        }
    }

    pub fn with_squash(mut self, squash: Activation) -> Self {
        self.squash = Some(squash);
        self
    }
}

/// Ordered partition of the branch outputs. Step order is semantic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionPlan {
    pub steps: Vec<ReductionStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub dims: Dims,
    pub branches: Vec<BranchSpec>,
    pub plan: ReductionPlan,
    /// Advisory only; engines take explicit seeds.
    pub seed_hint: Option<u64>,
}

impl FusionSpec {
    pub fn rank(&self) -> usize {
        self.branches.len()
    }

    pub fn branch_index(&self, id: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    /// True when the spec is plain rank-R MUTAN: identity activations,
    /// identity Φ and a single sum over all branches.
    pub fn is_identity_form(&self) -> bool {
        self.branches
            .iter()
            .all(|b| b.f_q == Activation::Identity && b.f_v == Activation::Identity && b.post.is_identity())
            && self.plan.steps.len() == 1
            && self.plan.steps[0].op == ReduceOp::Sum
            && self.plan.steps[0].squash.is_none()
    }

    /// Same dims and branch ids, with every activation, Φ and the plan
    /// replaced by the rank-R MUTAN form.
    pub fn to_identity_form(&self) -> FusionSpec {
        let branches: Vec<BranchSpec> = self
            .branches
            .iter()
            .map(|b| BranchSpec::new(b.id.clone(), Activation::Identity, Activation::Identity))
            .collect();
        let plan = ReductionPlan {
            steps: vec![ReductionStep::new(ReduceOp::Sum, branches.iter().map(|b| b.id.clone()))],
        };
        FusionSpec {
            dims: self.dims,
            branches,
            plan,
            seed_hint: self.seed_hint,
        }
    }

    pub fn with_dims(mut self, dims: Dims) -> Self {
        self.dims = dims;
        self
    }
}

/// Where a violation sits in the spec.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Dim(&'static str),
    Branches,
    Branch(usize),
    Plan,
    Step(usize),
    Member { step: usize, member: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: Location,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn violation(location: Location, message: impl Into<String>) -> Violation {
    Violation {
        location,
        message: message.into(),
    }
}

/// Check every spec invariant; an empty result means the spec is valid.
pub fn validate_spec(spec: &FusionSpec) -> Vec<Violation> {
    let mut out = Vec::new();

    for (key, value) in spec.dims.fields() {
        if value == 0 {
            let name = match key {
                "dq" => "d_q",
                "dv" => "d_v",
                "tq" => "t_q",
                "tv" => "t_v",
                "to" => "t_o",
                _ => "n_classes",
            };
            out.push(violation(Location::Dim(key), format!("dims: {name} must be >= 1")));
        }
    }

    if spec.branches.is_empty() {
        out.push(violation(Location::Branches, "spec must declare at least one branch"));
    }
    let mut seen = BTreeSet::new();
    for (i, b) in spec.branches.iter().enumerate() {
        if !seen.insert(b.id.as_str()) {
            out.push(violation(Location::Branch(i), format!("duplicate branch id {}", b.id)));
        }
        for (slot, act) in [("fq", b.f_q), ("fv", b.f_v)] {
            check_activation(&mut out, Location::Branch(i), &format!("branch {} {slot}", b.id), act);
        }
        let p = &b.post;
        if p.layers > 0 && p.hidden == 0 {
            out.push(violation(
                Location::Branch(i),
                format!("branch {}: post hidden must be >= 1 when layers > 0", b.id),
            ));
        }
        if p.skip == 0 {
            out.push(violation(
                Location::Branch(i),
                format!("branch {}: post skip period must be >= 1", b.id),
            ));
        }
        if !(0.0..1.0).contains(&p.dropout) {
            out.push(violation(
                Location::Branch(i),
                format!("branch {}: dropout must lie in [0, 1)", b.id),
            ));
        }
    }

    if spec.plan.steps.is_empty() {
        out.push(violation(Location::Plan, "reduction plan must have at least one step"));
    }
    let known: BTreeSet<&str> = spec.branches.iter().map(|b| b.id.as_str()).collect();
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (s, step) in spec.plan.steps.iter().enumerate() {
        if step.members.is_empty() {
            out.push(violation(Location::Step(s), format!("step {} has no members", s + 1)));
        }
        if let Some(sq) = step.squash {
            check_activation(&mut out, Location::Step(s), &format!("step {} squash", s + 1), sq);
        }
        for (m, id) in step.members.iter().enumerate() {
            let loc = Location::Member { step: s, member: m };
            if !known.contains(id.as_str()) {
                out.push(violation(loc, format!("plan references unknown branch {id}")));
                continue;
            }
            match owner.get(id.as_str()) {
                Some(&prev) if prev == s => out.push(violation(
                    loc,
                    format!("branch {id} appears more than once in step {}", s + 1),
                )),
                Some(_) => out.push(violation(loc, format!("branch {id} appears in multiple steps"))),
                None => {
                    owner.insert(id, s);
                }
            }
        }
    }
    for (i, b) in spec.branches.iter().enumerate() {
        if !owner.contains_key(b.id.as_str()) && seen.contains(b.id.as_str()) {
            // report each uncovered id once even when duplicated
            if spec.branches[..i].iter().all(|o| o.id != b.id) {
                out.push(violation(
                    Location::Plan,
                    format!("plan does not cover branch {}", b.id),
                ));
            }
        }
    }
    out
}

fn check_activation(out: &mut Vec<Violation>, loc: Location, what: &str, act: Activation) {
    if let Activation::LeakyRelu { slope } = act {
        if !(slope > 0.0 && slope < 1.0) {
            out.push(violation(loc, format!("{what}: leaky slope must lie in (0, 1)")));
        }
    }
}
