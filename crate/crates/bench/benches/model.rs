use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctxtrack_core::objectives::{gaussian_target, LossWeights};
use ctxtrack_core::{BBox, EncoderInput, Model, ModelConfig, PruneConfig, Tape, Tensor};

fn input(cfg: &ModelConfig, seed: u64) -> EncoderInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.encoder.template_resolution;
    let s = cfg.encoder.search_resolution;
    let n = cfg.scales.len();
    EncoderInput {
        static_crops: (0..n).map(|_| Tensor::uniform([3, t, t], -1.0, 1.0, &mut rng)).collect(),
        dynamic_crops: (0..n).map(|_| Tensor::uniform([3, t, t], -1.0, 1.0, &mut rng)).collect(),
        search: Tensor::uniform([3, s, s], -1.0, 1.0, &mut rng),
    }
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("softmax_attention");
    for n in [64usize, 256] {
        let q = Tensor::uniform([n, 64], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform([n, 64], -1.0, 1.0, &mut rng);
        let v = Tensor::uniform([n, 64], -1.0, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
                let kt = tape.transpose(k).unwrap();
                let s = tape.matmul(q, kt).unwrap();
                let s = tape.scale(s, 0.125).unwrap();
                let a = tape.softmax_rows(s).unwrap();
                let o = tape.matmul(a, v).unwrap();
                black_box(tape.value(o).data()[0])
            })
        });
    }
    group.finish();
}

fn predict(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_desk");
    for rho in [1.0, 0.7, 0.5] {
        let mut cfg = ModelConfig::desk();
        cfg.prune = if rho < 1.0 { PruneConfig::new(rho, vec![2, 4]) } else { PruneConfig::none() };
        let model = Model::new(cfg.clone(), 2).unwrap();
        let x = input(&cfg, 3);
        group.bench_with_input(BenchmarkId::new("rho", rho), &rho, |b, _| {
            b.iter(|| black_box(model.predict(&x).unwrap()))
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone(), 4).unwrap();
    let x = input(&cfg, 5);
    let g = cfg.head_geometry();
    let e = g.extent();
    let target = gaussian_target(&BBox::from_center(0.5 * e, 0.5 * e, 0.3 * e, 0.25 * e), &g).unwrap();
    let w = LossWeights::default();
    c.bench_function("loss_and_grads_desk", |b| {
        b.iter(|| black_box(model.loss_and_grads(&x, &target, &w).unwrap()))
    });
}

criterion_group!(benches, attention, predict, backward);
criterion_main!(benches);
