use std::collections::BTreeMap;

use fusion_core::checks::{max_rel_err, normal_vec, randomize_biases};
use fusion_core::dsl::{preset, ReduceOp, ReductionPlan, ReductionStep};
use fusion_core::graph::reduce_branches;
use fusion_core::oracle::{brute_reduce, build_core_tensor, span_residual, tucker_forward_ordered, ContractionOrder};
use fusion_core::{init_params, Activation, Dims, Engine, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut ChaCha8Rng) -> (ReductionPlan, BTreeMap<String, Tensor>) {
    let n = rng.random_range(1..=6);
    let len = rng.random_range(1..=5);
    let mut ids: Vec<String> = (0..n).map(|i| format!("b{i}")).collect();
    let outputs = ids
        .iter()
        .map(|id| (id.clone(), Tensor::vector(normal_vec(rng, len, 2.0))))
        .collect();
    ids.shuffle(rng);
    let mut steps = Vec::new();
    let mut rest = &ids[..];
    while !rest.is_empty() {
        let k = rng.random_range(1..=rest.len());
        let op = if rng.random_bool(0.5) {
            ReduceOp::Sum
        } else {
            ReduceOp::Prod
        };
        let mut step = ReductionStep::new(op, rest[..k].to_vec());
        if rng.random_bool(0.4) {
            step.squash = Some(Activation::ALL[rng.random_range(0..5)]);
        }
        steps.push(step);
        rest = &rest[k..];
    }
    (ReductionPlan { steps }, outputs)
}

#[test]
fn engine_fold_matches_brute_fold_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let (plan, outputs) = random_case(&mut rng);
        let a = reduce_branches(&plan, &outputs).unwrap();
        let b = brute_reduce(&plan, &outputs).unwrap();
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "case {case}: {:?} vs {:?}", a.data(), b.data());
    }
}

#[test]
fn both_folds_reject_the_same_bad_plans() {
    let outputs: BTreeMap<String, Tensor> = [("a", 1.0), ("b", 2.0)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), Tensor::vector(vec![v])))
        .collect();
    let plans = [
        vec![ReductionStep::new(ReduceOp::Sum, ["a"])],
        vec![ReductionStep::new(ReduceOp::Sum, ["a", "b", "c"])],
        vec![
            ReductionStep::new(ReduceOp::Sum, ["a", "b"]),
            ReductionStep::new(ReduceOp::Prod, ["b"]),
        ],
    ];
    for steps in plans {
        let plan = ReductionPlan { steps };
        assert!(reduce_branches(&plan, &outputs).is_err());
        assert!(brute_reduce(&plan, &outputs).is_err());
    }
}

#[test]
fn contraction_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..30 {
        let rank = rng.random_range(1..=3);
        let dims = Dims::new(
            4,
            5,
            rng.random_range(2..=6),
            rng.random_range(2..=6),
            rng.random_range(2..=4),
            3,
        );
        let spec = preset("mutan_r5", dims, rank).unwrap();
        let mut p = init_params(&spec, seed);
        randomize_biases(&mut p, &mut rng);
        let core = build_core_tensor(&p, rank, &dims).unwrap();
        let q = normal_vec(&mut rng, 4, 1.0);
        let v = normal_vec(&mut rng, 5, 1.0);
        let a = tucker_forward_ordered(&core, &p, &q, &v, ContractionOrder::QuestionFirst).unwrap();
        let b = tucker_forward_ordered(&core, &p, &q, &v, ContractionOrder::VisualFirst).unwrap();
        assert!(max_rel_err(&a, &b) <= 1e-12);
        let engine = Engine::new(&spec).unwrap().forward(&p, &q, &v, false, 0).unwrap();
        assert!(max_rel_err(&engine.logits, &a) <= 1e-10);
    }
}

#[test]
fn core_slices_have_rank_at_most_r() {
    let dims = Dims::new(4, 5, 4, 5, 3, 2);
    let spec = preset("mutan_r5", dims, 3).unwrap();
    let p = init_params(&spec, 11);
    let core = build_core_tensor(&p, 3, &dims).unwrap();
    for k in 0..3 {
        let rows =
            |name: &str, width: usize| -> Vec<f64> { p.get(name).unwrap().data()[k * width..(k + 1) * width].to_vec() };
        let left: Vec<Vec<f64>> = (1..=3).map(|r| rows(&format!("M_{r}"), 4)).collect();
        let right: Vec<Vec<f64>> = (1..=3).map(|r| rows(&format!("N_{r}"), 5)).collect();
        assert!(span_residual(&core.slice(k), &left, &right) <= 1e-10);
        // a fourth, unrelated outer product falls outside that span
        let mut other = core.slice(k);
        other[0] += 1.0;
        assert!(span_residual(&other, &left, &right) > 1e-3);
    }
}
