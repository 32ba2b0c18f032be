use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pointsup::render::{render, RenderConfig};
use pointsup::sim::simulate_dataset;
use pointsup::toy::{generate_suite, run_experiments, suite_dataset, Experiment, Supervision, TrainConfig};
use pointsup::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn simulation(c: &mut Criterion) {
    let ds = suite_dataset(&generate_suite(64, 0).unwrap(), "bench");
    let mut g = c.benchmark_group("simulate_dataset");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| simulate_dataset(&ds, 10, 1, None, exec).unwrap())
        });
    }
    g.finish();
}

fn rendering(c: &mut Criterion) {
    let f = |u: f64, v: f64| {
        let r = ((u - 0.5).powi(2) + (v - 0.45).powi(2)).sqrt();
        1.0 / (1.0 + (40.0 * (r - 0.3)).exp())
    };
    let cfg = RenderConfig::default();
    let mut g = c.benchmark_group("render_224");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| render(f, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let suite = generate_suite(8, 0).unwrap();
    let exp = Experiment::clean(TrainConfig {
        supervision: Supervision::Points(10),
        steps: 50,
        ..TrainConfig::default()
    });
    let mut g = c.benchmark_group("toy_experiment");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_experiments(&suite, &[exp], &[0, 1], exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, simulation, rendering, training);
criterion_main!(benches);
