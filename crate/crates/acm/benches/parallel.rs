//! Compares the data-parallel execution path (rayon, `parallel` feature)
//! against the sequential fallback on the three per-sample workloads:
//! view-batch augmentation, batch embedding, and kNN scoring.
//!
//! Run with `cargo bench` (parallel path via `map_range`) — with the
//! `parallel` feature disabled both variants collapse to sequential, so the
//! comparison is meaningful in the default configuration only.

use acm::augment::{apply_appearance_transform, sample_appearance_transform};
use acm::datagen::{generate_synthetic_traverse, ConditionSpec};
use acm::image::{derive_seed, ImageTensor};
use acm::model::{encoder_forward_single, init_params, ModelConfig, ModelParams};
use acm::parallel::{map_range, map_range_seq};
use acm::retrieval::{build_bank, embed, knn_query, DescriptorBank};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn bench_images(n: usize) -> Vec<ImageTensor> {
    let ds = generate_synthetic_traverse(n, &[ConditionSpec::reference()], 64, 42).unwrap();
    ds.reference_sequence().frames.iter().map(|f| f.image.clone()).collect()
}

fn bench_params() -> ModelParams<f32> {
    init_params(&ModelConfig::default()).unwrap()
}

fn augmentation(c: &mut Criterion) {
    let images = bench_images(16);
    let descs: Vec<_> = (0..images.len())
        .map(|i| sample_appearance_transform(derive_seed(7, 0xa0, i as u64)))
        .collect();
    let mut group = c.benchmark_group("augment-16x64px");
    group.bench_function("data-parallel", |b| {
        b.iter(|| {
            black_box(map_range(images.len(), |i| {
                apply_appearance_transform(&images[i], &descs[i])
            }))
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            black_box(map_range_seq(images.len(), |i| {
                apply_appearance_transform(&images[i], &descs[i])
            }))
        })
    });
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let images = bench_images(32);
    let params = bench_params();
    let mut group = c.benchmark_group("embed-32x64px");
    group.sample_size(20);
    group.bench_function("data-parallel", |b| {
        b.iter(|| black_box(embed(&params, &images).unwrap()))
    });
    group.bench_function("sequential-encoder", |b| {
        b.iter(|| {
            black_box(map_range_seq(images.len(), |i| {
                encoder_forward_single(&params, &images[i], None).unwrap()
            }))
        })
    });
    group.finish();
}

fn knn(c: &mut Criterion) {
    let images = bench_images(100);
    let params = bench_params();
    let ds = generate_synthetic_traverse(100, &[ConditionSpec::reference()], 64, 42).unwrap();
    let bank: DescriptorBank = build_bank(&params, ds.reference_sequence()).unwrap();
    let queries = embed(&params, &images).unwrap();
    let mut group = c.benchmark_group("knn-100q-100bank");
    group.bench_function("data-parallel", |b| {
        b.iter(|| {
            for row in queries.rows() {
                black_box(knn_query(&bank, row, 10).unwrap());
            }
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            for row in queries.rows() {
                let mut scored: Vec<(usize, f32)> = bank
                    .descriptors
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| (i, r.dot(&row)))
                    .collect();
                scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                scored.truncate(10);
                black_box(scored);
            }
        })
    });
    group.finish();
}

criterion_group!(benches, augmentation, embedding, knn);
criterion_main!(benches);
