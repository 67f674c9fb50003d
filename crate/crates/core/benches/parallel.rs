//! Parallel-vs-sequential throughput on the two data-parallel hot paths:
//! per-sample batch gradients and dataset evaluation. With the default
//! `parallel` feature the first variant runs on rayon; the `_seq` twins are
//! always sequential, so one build compares both.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use frs_core::data::{synth_generate, SynthSceneSpec};
use frs_core::detector::{
    batch_loss_and_grads, batch_loss_and_grads_seq, evaluate_model, FrsNanoConfig, NanoParams,
    Sample,
};
use frs_core::par;

fn samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let spec = SynthSceneSpec {
                image_size: size,
                small_targets: 4,
                occluded_pairs: 2,
                smoke_blobs: 2,
                noise_level: 0.02,
                num_classes: 8,
                seed: seed * 1000 + i as u64,
            };
            let (image, ann) = synth_generate(&spec).unwrap();
            Sample {
                image,
                boxes: ann.boxes,
            }
        })
        .collect()
}

fn bench_batch_grads(c: &mut Criterion) {
    let cfg = FrsNanoConfig::default();
    let params = NanoParams::init(&cfg, 0).unwrap();
    let batch = samples(8, 96, 1);

    let mut group = c.benchmark_group("batch_grads_8x96");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || (),
            |_| batch_loss_and_grads(&cfg, &params, &batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (),
            |_| batch_loss_and_grads_seq(&cfg, &params, &batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let cfg = FrsNanoConfig::default();
    let params = NanoParams::init(&cfg, 0).unwrap();
    let set = samples(16, 96, 2);

    let mut group = c.benchmark_group("evaluate_16x96");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| evaluate_model(&cfg, &params, &set, 0.05, 0.5).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            // same per-image closure through the sequential map
            let preds: Vec<_> = par::map_indexed_seq(&set, |_, s| {
                frs_core::detector::predict(&cfg, &params, &s.image, 0.05, 0.5).unwrap()
            });
            std::hint::black_box(preds)
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch_grads, bench_eval);
criterion_main!(benches);
