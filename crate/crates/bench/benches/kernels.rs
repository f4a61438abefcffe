use std::hint::black_box;

use bvqa_bench::{head, matrix, uniform};
use bvqa_core::head::{head_forward, hysteresis_pool_values, score_video};
use bvqa_core::ranking::soft_rank_values;
use bvqa_core::{PoolingConfig, SoftRankConfig, Tape, FUSED_CHANNELS};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn soft_rank(c: &mut Criterion) {
    let mut group = c.benchmark_group("soft_rank");
    for n in [32, 256, 2048] {
        let values = uniform(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &values, |b, v| {
            b.iter(|| soft_rank_values(black_box(v), &SoftRankConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn hysteresis(c: &mut Criterion) {
    let mut group = c.benchmark_group("hysteresis");
    for t in [64, 512] {
        let q = uniform(t, 2);
        group.bench_with_input(BenchmarkId::from_parameter(t), &q, |b, q| {
            b.iter(|| hysteresis_pool_values(black_box(q), &PoolingConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn head_passes(c: &mut Criterion) {
    let params = head(3);
    let feats = matrix(32, FUSED_CHANNELS, 4);
    let pooling = PoolingConfig::default();
    c.bench_function("head_forward_t32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = params.bind(&tape, false).unwrap();
            head_forward(&bound, black_box(&feats)).unwrap().value().data()[0]
        })
    });
    c.bench_function("head_forward_backward_t32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = params.bind(&tape, true).unwrap();
            let q = score_video(&bound, black_box(&feats), &pooling).unwrap();
            tape.backward(q).unwrap()
        })
    });
}

fn matmul(c: &mut Criterion) {
    let a = matrix(32, FUSED_CHANNELS, 5);
    let b = matrix(FUSED_CHANNELS, 128, 6);
    c.bench_function("matmul_32x4608x128", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
}

criterion_group!(benches, soft_rank, hysteresis, head_passes, matmul);
criterion_main!(benches);
