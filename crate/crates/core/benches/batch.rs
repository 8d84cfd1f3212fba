//! Per-sample work over a batch: rayon fan-out against the inline fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dgtn::model::{examples, gradients, init_params, predict, prepare_dataset, ModelConfig};
use dgtn::par;
use dgtn::protein_io::{synthesize_dataset, SyntheticSpec};

fn batch(c: &mut Criterion) {
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
    let spec = SyntheticSpec { seed: 1, n_samples: 16, len_min: 24, len_max: 24, coupling: 1.0, noise_sd: 0.05 };
    let data = synthesize_dataset(&spec).unwrap();
    let prepared = prepare_dataset(&data, &cfg).unwrap();
    let batch = examples(&data, &prepared).unwrap();
    let params = init_params(&cfg).unwrap();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());

    let mut g = c.benchmark_group("predict_batch16");
    let one = |i: usize| predict(&params, &cfg, batch[i].prep, batch[i].record).unwrap();
    g.bench_function("parallel", |b| b.iter(|| par::with_threads(threads, || black_box(par::map_range(batch.len(), one)))));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::map_range_seq(batch.len(), one))));
    g.finish();

    let mut g = c.benchmark_group("gradients_batch16");
    g.sample_size(20);
    g.bench_function("parallel", |b| b.iter(|| par::with_threads(threads, || gradients(&params, &cfg, &batch, None).unwrap())));
    g.bench_function("one_thread", |b| b.iter(|| par::with_threads(1, || gradients(&params, &cfg, &batch, None).unwrap())));
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
