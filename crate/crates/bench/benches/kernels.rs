use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gatelora::corpus::mix_seed;
use gatelora::model::InferenceModel;
use gatelora::trainer::{stratified_order, train_step};
use gatelora::{AspectId, SamplingConfig};
use gatelora_bench::{fixture, matrix};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = matrix(n, n, 1);
        let b = matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut f = fixture();
    let order = stratified_order(&f.corpus.train, 0);
    let batch: Vec<_> = order[..f.cfg.batch_size].iter().map(|&i| &f.corpus.train[i]).collect();
    let mut step = 0u64;
    c.bench_function("train_step/gated_full_loss_b32", |bench| {
        bench.iter(|| {
            step += 1;
            train_step(&mut f.model, &mut f.opt, &f.trainable, &batch, &f.cfg, mix_seed(&[step])).unwrap()
        })
    });
}

fn generation(c: &mut Criterion) {
    let f = fixture();
    let sample = &f.corpus.test[0];
    let sampling = SamplingConfig {
        max_new_tokens: 24,
        stop_token: None,
        ..Default::default()
    };
    let infer = InferenceModel::new(&f.model, sample.aspect).unwrap();
    c.bench_function("generate/kv_cache_24_tokens", |bench| {
        bench.iter(|| infer.generate(&sample.prompt(), &sampling, 7).unwrap())
    });
    c.bench_function("generate/merge_adapters", |bench| {
        bench.iter(|| InferenceModel::new(&f.model, AspectId(2)).unwrap())
    });
}

criterion_group!(benches, matmul, training_step, generation);
criterion_main!(benches);
