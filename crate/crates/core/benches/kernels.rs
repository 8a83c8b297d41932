//! Sequential against rayon-parallel execution of the hot paths.
//!
//! Both modes produce bitwise-identical results; only wall time differs.

use colanet::degradation::Rng;
use colanet::exec;
use colanet::network::{l2_loss, Forward, Mode, ModelConfig, ModelWeights};
use colanet::{Graph, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed, 1);
    Tensor::from_fn(shape, |_| rng.gaussian() as f32)
}

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3_64ch_4x64x64");
    let x = randn(&[4, 64, 64, 64], 1);
    let w = randn(&[64, 64, 3, 3], 2);
    let b = Tensor::zeros(&[64]);
    for (name, par) in MODES {
        exec::set_parallel(par);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let g = Graph::new();
                let (xv, wv, bv) = (g.input(x.clone()), g.param(w.clone()), g.param(b.clone()));
                let y = g.conv2d(xv, wv, bv, 1).unwrap();
                let loss = g.mean(y);
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("cab_forward_16ch_4x64x64");
    let cfg = ModelConfig { num_cab: 1, channels: 16, ..ModelConfig::basic() };
    let weights = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let x = randn(&[4, 16, 67, 67], 3);
    for (name, par) in MODES {
        exec::set_parallel(par);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let g = Graph::new();
                let fwd = Forward::new(&g, &weights, Mode::Infer);
                let xv = g.input(x.clone());
                fwd.cab_forward(0, xv).unwrap().0
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_1cab_16ch_8x31x31");
    group.sample_size(10);
    let cfg = ModelConfig { num_cab: 1, channels: 16, ..ModelConfig::basic() };
    let weights = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let x = randn(&[8, 1, 31, 31], 4);
    let y = randn(&[8, 1, 31, 31], 5);
    for (name, par) in MODES {
        exec::set_parallel(par);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let g = Graph::new();
                let loss = {
                    let fwd = Forward::new(&g, &weights, Mode::Train);
                    let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
                    let (pred, _) = fwd.cola_forward(xv).unwrap();
                    l2_loss(&g, pred, yv).unwrap()
                };
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, attention, training_step);
criterion_main!(benches);
