use std::collections::BTreeMap;

use super::{BranchSpec, Dims, FusionSpec, PostFusion, ReduceOp, ReductionPlan, ReductionStep};
use crate::tensor::Activation;

pub const PRESET_NAMES: [&str; 6] = ["mlb", "mutan_r5", "ne", "ne_fg", "ne_ps", "ne_fg_mlp6"];

const FULL_RANK: usize = 5;

/// Full-scale dimensions: 2400-d question vectors, 2048-d visual vectors,
/// 310-d projections, 510-d fused space, 2000 answer classes.
pub fn full_dims() -> Dims {
    Dims::new(2400, 2048, 310, 310, 510, 2000)
}

fn branch_ids(rank: usize) -> Vec<String> {
    (1..=rank).map(|r| format!("b{r}")).collect()
}

fn sum_all(ids: &[String]) -> ReductionPlan {
    ReductionPlan {
        steps: vec![ReductionStep::new(ReduceOp::Sum, ids.iter().cloned())],
    }
}

/// Sum of the first R−1 branches multiplied by the squashed last branch.
fn gated(ids: &[String], squash: Activation) -> ReductionPlan {
    let (last, rest) = ids.split_last().expect("gated plan needs a branch");
    if rest.is_empty() {
        return ReductionPlan {
            steps: vec![ReductionStep::new(ReduceOp::Prod, [last.clone()]).with_squash(squash)],
        };
    }
    ReductionPlan {
        steps: vec![
            ReductionStep::new(ReduceOp::Sum, rest.iter().cloned()),
            ReductionStep::new(ReduceOp::Prod, [last.clone()]).with_squash(squash),
        ],
    }
}

fn identity_branches(ids: &[String]) -> Vec<BranchSpec> {
    ids.iter()
        .map(|id| BranchSpec::new(id.clone(), Activation::Identity, Activation::Identity))
        .collect()
}

/// Visual side always SeLU; question side cycles through the five
/// candidates in grid order.
fn ensembled_branches(ids: &[String]) -> Vec<BranchSpec> {
    ids.iter()
        .enumerate()
        .map(|(r, id)| BranchSpec::new(id.clone(), Activation::ALL[r % 5], Activation::Selu))
        .collect()
}

/// Build the named preset at arbitrary dims and branch count. `mlb` ignores
/// `rank` and always has one branch. Gated presets need `rank >= 2` to be
/// meaningful; at rank 1 they degrade to a single squashed product.
pub fn preset(name: &str, dims: Dims, rank: usize) -> Option<FusionSpec> {
    let rank = if name == "mlb" { 1 } else { rank };
    let ids = branch_ids(rank);
    let (branches, plan) = match name {
        "mlb" | "mutan_r5" => (identity_branches(&ids), sum_all(&ids)),
        "ne" => (ensembled_branches(&ids), sum_all(&ids)),
        "ne_fg" => (ensembled_branches(&ids), gated(&ids, Activation::Sigmoid)),
        "ne_ps" => (ensembled_branches(&ids), gated(&ids, Activation::Tanh)),
        "ne_fg_mlp6" => {
            let mut branches = ensembled_branches(&ids);
            for b in &mut branches {
                b.post = PostFusion::mlp(6, 128);
            }
            (branches, gated(&ids, Activation::Sigmoid))
        }
        _ => return None,
    };
    Some(FusionSpec {
        dims,
        branches,
        plan,
        seed_hint: None,
    })
}

/// All presets at full-scale dims with five branches (`mlb` has one).
pub fn builtin_presets() -> BTreeMap<&'static str, FusionSpec> {
    PRESET_NAMES
        .iter()
        .map(|&name| (name, preset(name, full_dims(), FULL_RANK).unwrap()))
        .collect()
}
