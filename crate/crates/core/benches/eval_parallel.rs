//! Wall-clock comparison of the two evaluation paths (rayon fan-out vs the
//! in-order loop; results are bit-identical) and of the batched instance
//! graph against its per-query reference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::rngs::StdRng;
use rand::SeedableRng;

use hgnn_core::diffcore::Tape;
use hgnn_core::episodes::{generate_synthetic_pool, Split, SyntheticConfig};
use hgnn_core::graph::GraphMode;
use hgnn_core::models::{ignn_forward, ignn_forward_per_query, ModelConfig};
use hgnn_core::trainer::{evaluate, init_model, EvalConfig};

fn eval_fanout(c: &mut Criterion) {
    let store = generate_synthetic_pool(&SyntheticConfig::default()).expect("default pool");
    let model = init_model(ModelConfig::default(), 42).expect("default model");
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for n_tasks in [50, 200] {
        for parallel in [false, true] {
            let cfg = EvalConfig {
                n_tasks,
                parallel,
                ..EvalConfig::default()
            };
            let label = if parallel { "parallel" } else { "sequential" };
            group.bench_with_input(BenchmarkId::new(label, n_tasks), &cfg, |b, cfg| {
                b.iter(|| evaluate(&model, &store, cfg).expect("evaluation runs"));
            });
        }
    }
    group.finish();
}

fn ignn_batching(c: &mut Criterion) {
    let store = generate_synthetic_pool(&SyntheticConfig::default()).expect("default pool");
    let model = init_model(ModelConfig::default(), 42).expect("default model");
    let mut rng = StdRng::seed_from_u64(7);
    let ep = store.sample_episode(5, 5, 15, Split::Test, &mut rng).expect("episode");
    let mut group = c.benchmark_group("ignn_forward");
    group.sample_size(10);
    group.bench_function("batched", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let s = tape.constant_from(ep.n_support(), ep.dim, ep.support.clone()).unwrap();
            let q = tape.constant_from(ep.n_query(), ep.dim, ep.queries.clone()).unwrap();
            ignn_forward(&mut tape, &model.set, s, q, &model.arch.ignn, GraphMode::Inductive, 5, 5)
                .expect("forward runs")
        });
    });
    group.bench_function("per_query", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let s = tape.constant_from(ep.n_support(), ep.dim, ep.support.clone()).unwrap();
            let q = tape.constant_from(ep.n_query(), ep.dim, ep.queries.clone()).unwrap();
            ignn_forward_per_query(&mut tape, &model.set, s, q, &model.arch.ignn, 5, 5)
                .expect("forward runs")
        });
    });
    group.finish();
}

criterion_group!(benches, eval_fanout, ignn_batching);
criterion_main!(benches);
