use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rae_core::codec::{compress_batch, compress_batch_sequential, CodecConfig};
use rae_core::rae::{RaeDims, RaeParams};
use rae_core::synth::{sinusoid_corpus, SynthConfig};
use rae_core::trainer::{build_dataset, TrainConfig};

fn corpus(n_traces: usize) -> Vec<rae_core::preprocess::TimeSeries> {
    sinusoid_corpus(&SynthConfig {
        n_traces,
        len: 2000,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
    .iter()
    .map(|t| t.normalize())
    .collect()
}

fn bench_compress(c: &mut Criterion) {
    let params = RaeParams::init(RaeDims::default(), 0).unwrap();
    let series = corpus(16);
    let cfg = CodecConfig::new(0.1, 32);
    let mut group = c.benchmark_group("compress_batch");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", series.len()), |b| {
        b.iter(|| compress_batch(&params, &series, &cfg))
    });
    group.bench_function(BenchmarkId::new("sequential", series.len()), |b| {
        b.iter(|| compress_batch_sequential(&params, &series, &cfg))
    });
    group.finish();
}

fn bench_dataset(c: &mut Criterion) {
    let series = corpus(64);
    let cfg = TrainConfig::default();
    c.bench_function("build_dataset/64", |b| {
        b.iter(|| build_dataset(&series, &cfg).unwrap())
    });
}

criterion_group!(benches, bench_compress, bench_dataset);
criterion_main!(benches);
