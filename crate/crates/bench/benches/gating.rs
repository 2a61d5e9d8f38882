use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fiberlab::gating::{gate_trajectory, GatingConfig};
use fiberlab::objectives::{objective_value_and_gradient, Method};
use fiberlab::trainer::{EnvKind, RunConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn log_ratios(len: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

fn trainer() -> Trainer {
    let mut cfg = RunConfig::default();
    cfg.env.kind = EnvKind::Blend;
    cfg.method.workers = 1;
    Trainer::new(cfg).expect("default config builds")
}

fn gating(c: &mut Criterion) {
    let cfg = GatingConfig::default();
    let mut group = c.benchmark_group("gate_trajectory");
    for len in [16, 256, 4096] {
        let ys = log_ratios(len, 0.3, len as u64);
        group.bench_with_input(BenchmarkId::from_parameter(len), &ys, |b, ys| {
            b.iter(|| gate_trajectory(black_box(ys), &cfg).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let trainer = trainer();
    let batch = trainer.sample_batch().unwrap().records;
    let mut policy = trainer.policy().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for p in policy.params_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    let params = trainer.config().objective_params().unwrap();
    let mut group = c.benchmark_group("objective_gradient");
    for method in Method::ALL {
        group.bench_function(method.name(), |b| {
            b.iter(|| objective_value_and_gradient(black_box(&policy), &batch, method, &params).unwrap())
        });
    }
    group.finish();
}

fn rollouts(c: &mut Criterion) {
    let trainer = trainer();
    c.bench_function("sample_batch", |b| b.iter(|| trainer.sample_batch().unwrap()));
}

criterion_group!(benches, gating, gradients, rollouts);
criterion_main!(benches);
