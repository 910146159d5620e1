use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use osasc_bench::{scene_clip, uniform_values};
use osasc_core::evaluation::auroc;
use osasc_core::nn::{LayerSpec, Network, Tensor};
use osasc_core::openmax::fit_weibull_tail;
use osasc_core::{FeatureConfig, FeaturePipeline};

fn features(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_mel");
    for (name, sr, cfg) in [
        ("desk_8k", 8000, FeatureConfig { window_size: 256, hop: 128, n_mels: 32, ..FeatureConfig::default() }),
        ("full_44k", 44_100, FeatureConfig::default()),
    ] {
        let pipeline = FeaturePipeline::new(cfg, sr).unwrap();
        let clip = scene_clip(sr, 1.0);
        group.bench_function(name, |b| b.iter(|| pipeline.extract(black_box(&clip)).unwrap()));
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_48ch");
    group.sample_size(20);
    for hw in [33usize, 64] {
        let spec = [LayerSpec::Conv2d { in_channels: 48, out_channels: 48, kernel: 3, stride: 1 }];
        let mut net = Network::new(vec![48, hw, hw], &spec, 0).unwrap();
        let x = Tensor::new(vec![8, 48, hw, hw], uniform_values(8 * 48 * hw * hw, 1)).unwrap();
        let g = Tensor::new(vec![8, 48, hw, hw], uniform_values(8 * 48 * hw * hw, 2)).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", hw), &hw, |b, _| {
            b.iter(|| net.infer(black_box(&x), None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", hw), &hw, |b, _| {
            b.iter(|| {
                net.forward(black_box(&x), None).unwrap();
                net.backward(black_box(&g)).unwrap()
            })
        });
    }
    group.finish();
}

fn weibull(c: &mut Criterion) {
    let values: Vec<f64> = uniform_values(1000, 3).iter().map(|u| (-(1.0 - u).ln()).sqrt()).collect();
    let mut group = c.benchmark_group("weibull_fit");
    for tail in [20, 1000] {
        group.bench_with_input(BenchmarkId::from_parameter(tail), &tail, |b, &t| {
            b.iter(|| fit_weibull_tail(black_box(&values), t).unwrap())
        });
    }
    group.finish();
}

fn roc(c: &mut Criterion) {
    let mut group = c.benchmark_group("auroc");
    for n in [100usize, 10_000] {
        let scores = uniform_values(n, 4);
        let labels: Vec<bool> = uniform_values(n, 5).iter().map(|u| *u < 0.3).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter_batched(|| scores.clone(), |s| auroc(&s, &labels).unwrap(), BatchSize::SmallInput)
        });
    }
    group.finish();
}

criterion_group!(benches, features, conv, weibull, roc);
criterion_main!(benches);
