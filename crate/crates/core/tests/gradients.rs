//! Full-model gradient checks against central finite differences. Every
//! trainable configuration must agree with the numeric derivative to a
//! relative error of 1e-4.

use hgnn_core::diffcore::finite_diff_check;
use hgnn_core::episodes::Episode;
use hgnn_core::graph::{GraphMode, OperatorKind};
use hgnn_core::models::{forward_episode, ModelConfig, Variant};
use hgnn_core::trainer::init_model;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_episode(n: usize, k: usize, q: usize, d: usize, seed: u64) -> Episode {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let support = draw(n * k * d);
    let queries = draw(n * q * d);
    let support_labels = (0..n * k).map(|i| i / k).collect();
    let query_labels = (0..n * q).map(|i| i / q).collect();
    Episode::from_parts(n, k, q, d, support, support_labels, queries, query_labels).unwrap()
}

fn check(cfg: ModelConfig, mode: GraphMode, n: usize, k: usize, q: usize, seed: u64) {
    let label = format!(
        "{} {:?} {:?} depth {}",
        cfg.variant.name(),
        cfg.operator,
        mode,
        cfg.depth
    );
    let ep = random_episode(n, k, q, cfg.d_in, seed);
    let mut model = init_model(cfg, seed).unwrap();
    assert!(model.set.scalar_count() > 0, "{label}: nothing to check");
    // Zero-initialized biases park the subtract scorer's diagonal pairs
    // exactly on the activation kink, where finite differences straddle the
    // two slopes. Jitter every parameter so the check runs at a generic point.
    let mut jitter = StdRng::seed_from_u64(seed ^ 0x5eed);
    for id in model.set.ids() {
        for v in &mut model.set.get_mut(id).tensor.values {
            *v += jitter.random_range(-0.05..0.05);
        }
    }
    let arch = model.arch.clone();
    let report = finite_diff_check(&mut model.set, 1e-5, |tape, set| {
        let fwd = forward_episode(tape, set, &arch, &ep, mode)?;
        Ok(fwd.total)
    })
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-4,
        "{label}: {}",
        report.summary()
    );
}

fn base(variant: Variant, operator: OperatorKind) -> ModelConfig {
    ModelConfig {
        d_in: 4,
        d: 4,
        variant,
        operator,
        baseline_n_way: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn protonet_with_adapter() {
    let cfg = ModelConfig {
        adapter: true,
        ..base(Variant::ProtoNet, OperatorKind::InnerProduct)
    };
    check(cfg, GraphMode::Inductive, 2, 2, 2, 30);
}

#[test]
fn pgnn_only_all_operators() {
    for (i, op) in [OperatorKind::InnerProduct, OperatorKind::ConcatMlp, OperatorKind::SubtractMlp]
        .into_iter()
        .enumerate()
    {
        check(base(Variant::PgnnOnly, op), GraphMode::Inductive, 2, 2, 2, 40 + i as u64);
    }
}

#[test]
fn ignn_only_all_operators_both_modes() {
    for (i, op) in [OperatorKind::InnerProduct, OperatorKind::ConcatMlp, OperatorKind::SubtractMlp]
        .into_iter()
        .enumerate()
    {
        for mode in [GraphMode::Inductive, GraphMode::Transductive] {
            check(base(Variant::IgnnOnly, op), mode, 2, 2, 2, 50 + i as u64);
        }
    }
}

#[test]
fn hgnn_all_operators_both_modes() {
    for (i, op) in [OperatorKind::InnerProduct, OperatorKind::ConcatMlp, OperatorKind::SubtractMlp]
        .into_iter()
        .enumerate()
    {
        for mode in [GraphMode::Inductive, GraphMode::Transductive] {
            check(base(Variant::Hgnn, op), mode, 2, 2, 2, 60 + i as u64);
        }
    }
}

#[test]
fn hgnn_with_adapter_and_depth_two() {
    let cfg = ModelConfig {
        adapter: true,
        depth: 2,
        ..base(Variant::Hgnn, OperatorKind::InnerProduct)
    };
    check(cfg, GraphMode::Inductive, 2, 2, 2, 70);
}

#[test]
fn labelprop_baseline() {
    for (i, op) in [OperatorKind::InnerProduct, OperatorKind::ConcatMlp].into_iter().enumerate() {
        check(base(Variant::LabelProp, op), GraphMode::Inductive, 2, 2, 2, 80 + i as u64);
    }
}

#[test]
fn hgnn_reference_shape() {
    let cfg = ModelConfig {
        d_in: 8,
        d: 8,
        variant: Variant::Hgnn,
        ..ModelConfig::default()
    };
    check(cfg, GraphMode::Inductive, 3, 2, 3, 90);
}
