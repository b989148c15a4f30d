//! Parallel-vs-sequential throughput on the two data-parallel hot paths:
//! per-element unrolled-loss gradients (the trainer's inner loop) and
//! batched solver runs (sweeps). `ordered_map` uses the rayon pool when the
//! crate is built with the default `parallel` feature and degrades to the
//! sequential path without it; `ordered_map_seq` is always sequential, so
//! the pair of benchmarks measures the speedup directly.

use criterion::{criterion_group, criterion_main, Criterion};
use lmd::par::{ordered_map, ordered_map_seq};
use lmd::problems::{FunctionClass, Problem, ProblemKind};
use lmd::solvers::{gd_run, StepSchedule};
use lmd::tensor::Tensor;
use lmd::training::{sample_batch, Arch, TrainConfig, Trainer};
use std::hint::black_box;
use std::sync::Arc;

fn batch_gradients(c: &mut Criterion) {
    let fc = FunctionClass::new(ProblemKind::TvDenoise, 5);
    let cfg = TrainConfig {
        batch_size: 8,
        seed: 5,
        ..TrainConfig::preset(ProblemKind::TvDenoise, 5)
    };
    let trainer = Trainer::new(Arch::IcnnMlp, fc.dim, &cfg);
    let batch = sample_batch(&fc, 5, 0, cfg.batch_size);

    let mut group = c.benchmark_group("unrolled_batch_gradients");
    group.sample_size(10);
    group.bench_function("ordered_map", |b| {
        b.iter(|| black_box(trainer.batch_loss_and_grads(black_box(&batch), 1.0, true).unwrap()))
    });
    // sequential reference: same per-element work, one element at a time
    group.bench_function("ordered_map_seq", |b| {
        b.iter(|| {
            let grads = ordered_map_seq(&batch, |el: &(Arc<Problem>, Tensor)| {
                trainer
                    .batch_loss_and_grads(std::slice::from_ref(el), 1.0, true)
                    .unwrap()
            });
            black_box(grads)
        })
    });
    group.finish();
}

fn sweep_runs(c: &mut Criterion) {
    let fc = FunctionClass::new(ProblemKind::TvDenoise, 9);
    let instances: Vec<(Problem, Tensor)> =
        (0..8).map(|i| fc.sample_instance(i as u64)).collect();
    let sched = StepSchedule::fixed(1e-2);

    let mut group = c.benchmark_group("sweep_gd_runs");
    group.sample_size(10);
    group.bench_function("ordered_map", |b| {
        b.iter(|| {
            black_box(ordered_map(&instances, |(prob, x0)| {
                gd_run(prob, x0, &sched, 50).unwrap().final_objective()
            }))
        })
    });
    group.bench_function("ordered_map_seq", |b| {
        b.iter(|| {
            black_box(ordered_map_seq(&instances, |(prob, x0)| {
                gd_run(prob, x0, &sched, 50).unwrap().final_objective()
            }))
        })
    });
    group.finish();
}

criterion_group!(benches, batch_gradients, sweep_runs);
criterion_main!(benches);
