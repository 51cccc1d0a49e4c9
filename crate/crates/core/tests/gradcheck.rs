mod common;

use std::collections::BTreeSet;

use common::{check_gradients, random_graph, ROp};
use proptest::prelude::*;

const TOLERANCE: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn random_graphs_match_finite_differences(seed in any::<u64>()) {
        let rg = random_graph(seed);
        let r = check_gradients(&rg);
        prop_assert!(r.checked > 0, "no coordinate checked: {}", rg.describe());
        prop_assert!(r.max_rel_err <= TOLERANCE, "rel err {:.3e}: {}", r.max_rel_err, rg.describe());
    }
}

fn op_name(op: &ROp) -> &'static str {
    match op {
        ROp::Leaf(_) => "leaf",
        ROp::MatMul(..) => "matmul",
        ROp::Add(..) => "add",
        ROp::Sub(..) => "sub",
        ROp::Mul(..) => "mul",
        ROp::AddRow(..) => "add_row",
        ROp::Scale(..) => "scale",
        ROp::AddScalar(..) => "add_scalar",
        ROp::Relu(_) => "relu",
        ROp::Conv2d { .. } => "conv2d",
        ROp::MaxPool(..) => "max_pool2d",
        ROp::Flatten(_) => "flatten",
        ROp::LogSoftmax(_) => "log_softmax",
        ROp::Softmax(_) => "softmax",
        ROp::Log(_) => "log",
        ROp::LogClamped(..) => "log_clamped",
        ROp::Sum(_) => "sum",
        ROp::Mean(_) => "mean",
        ROp::Gather(..) => "gather",
    }
}

#[test]
fn generator_covers_every_op() {
    let seen: BTreeSet<&str> = (0..200)
        .flat_map(|s| random_graph(s).ops.iter().map(op_name).collect::<Vec<_>>())
        .collect();
    assert_eq!(seen.len(), 19, "{seen:?}");
}

#[test]
fn reference_agrees_with_engine_forward() {
    for seed in 0..50 {
        let rg = random_graph(seed);
        let mut g = fairbat::Graph::new();
        let (_, vars) = rg.build(&mut g);
        let (vals, _) = rg.eval(&rg.leaf_values_f64());
        let engine = g.scalar(vars[rg.output()]) as f64;
        let reference = vals[rg.output()][0];
        assert!((engine - reference).abs() <= 1e-5 * reference.abs().max(1.0), "seed {seed}");
    }
}
