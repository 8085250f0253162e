//! Benchmarks for the simulator's hot paths: compression operators, local
//! and aggregation steps, and the optimal-p grid search.
//!
//! Run with: cargo bench -p l2gd-bench

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use l2gd_core::compressors::{compress, CompressorKind};
use l2gd_core::data::synth_instance;
use l2gd_core::engine::{self, L2gdConfig};
use l2gd_core::objective::{LogisticProblem, Objective, StackedModel};
use l2gd_core::rng::StreamFactory;
use l2gd_core::theory::grid_min_gamma;

fn bench_compressors(c: &mut Criterion) {
    let d = 124;
    let mut rng = StreamFactory::new(7).stream(0);
    let x = ndarray::Array1::from_iter((0..d).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0));
    let mut group = c.benchmark_group("compress");
    for kind in [
        CompressorKind::Identity,
        CompressorKind::RandomDithering { levels: 8 },
        CompressorKind::Natural,
        CompressorKind::TernGrad,
        CompressorKind::Bernoulli { keep_prob: 0.5 },
        CompressorKind::TopK { k: 12 },
    ] {
        group.bench_function(BenchmarkId::from_parameter(kind.label()), |b| {
            b.iter(|| compress(&kind, black_box(x.view()), &mut rng).unwrap())
        });
    }
    group.finish();
}

fn bench_engine_steps(c: &mut Criterion) {
    let data = synth_instance(5, 124, 321, 1.0, 3);
    let problem = LogisticProblem::new(&data, 0.01, 10.0);
    let cfg = L2gdConfig::uniform(
        5,
        0.4,
        1e-3,
        1,
        CompressorKind::Bernoulli { keep_prob: 0.5 },
        CompressorKind::Natural,
        11,
    );
    let mut group = c.benchmark_group("l2gd_step");
    group.bench_function("local", |b| {
        let mut state = engine::init(StackedModel::zeros(5, problem.d()), &cfg).unwrap();
        b.iter(|| engine::step_with_coin(&mut state, &problem, &cfg, false).unwrap())
    });
    group.bench_function("aggregation_communicating", |b| {
        let mut state = engine::init(StackedModel::zeros(5, problem.d()), &cfg).unwrap();
        b.iter(|| {
            state.prev_xi = false;
            engine::step_with_coin(&mut state, &problem, &cfg, true).unwrap()
        })
    });
    group.finish();
}

fn bench_gradient(c: &mut Criterion) {
    let data = synth_instance(5, 124, 321, 1.0, 5);
    let problem = LogisticProblem::new(&data, 0.01, 10.0);
    let x = StackedModel::zeros(5, 124);
    c.bench_function("full_gradient_a1a_scale", |b| {
        b.iter(|| l2gd_core::objective::full_gradient(&problem, black_box(&x)))
    });
}

fn bench_grid_search(c: &mut Criterion) {
    c.bench_function("grid_min_gamma_100k", |b| {
        b.iter(|| grid_min_gamma(black_box(10.0), 5, 0.23, 1e4, 100_000))
    });
}

criterion_group!(
    benches,
    bench_compressors,
    bench_engine_steps,
    bench_gradient,
    bench_grid_search
);
criterion_main!(benches);
