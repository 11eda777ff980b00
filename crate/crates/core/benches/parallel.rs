//! Parallel vs sequential evaluation benchmarks.
//!
//! Compares the rayon-backed evaluation path against the sequential fallback
//! on suites of increasing size, plus a short end-to-end run in both modes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qdmerge_core::engine::{train, EvalMode, RunConfig};
use qdmerge_core::suite::{
    build_suite, evaluate_all, evaluate_all_seq, make_analytic_suite, AnalyticSpec, SuiteSpec,
};

fn eval_benchmarks(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate_all");
    for (label, spec) in [
        ("default-3x8", AnalyticSpec::default()),
        (
            "wide-8x64",
            AnalyticSpec { tasks: 8, layers: 4, layer_width: 64, ..Default::default() },
        ),
    ] {
        let suite = make_analytic_suite(&spec).unwrap();
        let candidate = suite.experts[0].clone();
        group.bench_with_input(BenchmarkId::new("parallel", label), &suite, |b, s| {
            b.iter(|| evaluate_all(&candidate, &s.evaluators).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", label), &suite, |b, s| {
            b.iter(|| evaluate_all_seq(&candidate, &s.evaluators).unwrap())
        });
    }
    group.finish();
}

fn train_benchmarks(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_50_generations");
    group.sample_size(10);
    let config = RunConfig {
        generations: 50,
        suite: SuiteSpec::Analytic(AnalyticSpec {
            tasks: 4,
            layers: 3,
            layer_width: 32,
            ..Default::default()
        }),
        ..Default::default()
    };
    for (label, mode) in [("parallel", EvalMode::Auto), ("sequential", EvalMode::Sequential)] {
        group.bench_function(label, |b| {
            b.iter(|| {
                let suite = build_suite(&config.suite).unwrap();
                train(config.clone(), suite, mode).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, eval_benchmarks, train_benchmarks);
criterion_main!(benches);
