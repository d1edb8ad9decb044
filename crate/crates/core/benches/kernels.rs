use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ldh_core::evaluation::evaluate_quality;
use ldh_core::exec::{self, Mode};
use ldh_core::metrics::ssim;
use ldh_core::networks::{Models, NetworkConfig};
use ldh_core::synth;
use ldh_core::tensor::Tensor;

const MODES: [(Mode, &str); 2] = [
    (Mode::Sequential, "sequential"),
    (Mode::Parallel, "parallel"),
];

fn hide_forward(c: &mut Criterion) {
    let models = Models::<f32>::init(NetworkConfig::new(2, 16, 64), 0).unwrap();
    let images = synth::dataset(8, 64, 1);
    let items: Vec<Tensor<f32>> = images.iter().map(|im| im.to_tensor()).collect();
    let batch = Tensor::stack(&items);
    let mut group = c.benchmark_group("hide_forward_8x64");
    for (mode, name) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| models.forward_hide(batch.clone()).unwrap());
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let models = Models::<f32>::init(NetworkConfig::new(2, 8, 64), 0).unwrap();
    let test = synth::dataset(16, 64, 2);
    let mut group = c.benchmark_group("evaluate_16x64");
    group.sample_size(10);
    for (mode, name) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| evaluate_quality(&models, &test, 2, 0).unwrap());
        });
    }
    group.finish();
}

fn ssim_batch(c: &mut Criterion) {
    let a = synth::dataset(32, 128, 3);
    let b = synth::dataset(32, 128, 4);
    let mut group = c.benchmark_group("ssim_32x128");
    for (mode, name) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            exec::set_mode(mode);
            bch.iter(|| exec::map_indexed(a.len(), |i| ssim(&a[i], &b[i]).unwrap()));
        });
    }
    group.finish();
}

criterion_group!(benches, hide_forward, evaluation, ssim_batch);
criterion_main!(benches);
