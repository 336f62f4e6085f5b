use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use pma_bench::{batch, desk_fixture};
use pma_core::coarse::{select, AttentionMode, DEFAULT_TAU};
use pma_core::corpus::Split;
use pma_core::harness::evaluate::{gallery_features, score_captions};
use pma_core::params::Ctx;
use pma_core::visual::REGIONS;
use pma_core::{Rng, Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_backward");
    for n in [32, 128] {
        let mut rng = Rng::new(n as u64);
        let a = Tensor::new(vec![n, n], rng.uniform_vec(n * n, -1.0, 1.0)).unwrap();
        let b = Tensor::new(vec![n, n], rng.uniform_vec(n * n, -1.0, 1.0)).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let t = Tape::new();
                let (x, y) = (t.param(a.clone()), t.param(b.clone()));
                let loss = t.sum_all(t.matmul(x, y).unwrap()).unwrap();
                t.backward(loss).unwrap();
                black_box(t.grad(x))
            })
        });
    }
    g.finish();
}

fn hard_select(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let grids: Vec<Vec<f64>> = (0..256).map(|_| rng.uniform_vec(REGIONS, -1.0, 1.0)).collect();
    c.bench_function("hard_select_256_grids", |b| {
        b.iter(|| grids.iter().map(|s| select(black_box(s), DEFAULT_TAU, AttentionMode::Hard).count()).sum::<usize>())
    });
}

fn train_step(c: &mut Criterion) {
    let (corpus, model) = desk_fixture(16);
    let (texts, images, labels) = batch(&corpus, &model, 16);
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    g.bench_function("forward_backward_batch16", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = model.store.bind(&tape, &[]);
            let ctx = Ctx::new(&tape, &bound);
            let (loss, _) = model.loss(&ctx, &texts, &images, &labels, None, true).unwrap();
            tape.backward(loss).unwrap();
            black_box(loss)
        })
    });
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let (corpus, model) = desk_fixture(4);
    let test = corpus.split_images(Split::Test);
    let images: Vec<_> = test.iter().map(|&i| &corpus.images[i].image).collect();
    let gallery = gallery_features(&model, &images).unwrap();
    let captions: Vec<_> = test.iter().map(|&i| corpus.encode(i, 0)).collect();
    let mut g = c.benchmark_group("evaluation");
    g.sample_size(10);
    g.bench_function("gallery_features_8", |b| b.iter(|| gallery_features(&model, black_box(&images)).unwrap()));
    g.bench_function("score_8x8", |b| b.iter(|| score_captions(&model, &gallery, black_box(&captions)).unwrap()));
    g.finish();
}

criterion_group!(benches, matmul, hard_select, train_step, scoring);
criterion_main!(benches);
