//! Throughput of the hot kernels: convolution, the U-Net forward pass,
//! strong augmentation, phantom generation and full training steps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use semiseg_core::augment::{strong_style, StrongAugConfig};
use semiseg_core::model::{predict, ModelParams, UNetConfig};
use semiseg_core::phantom::{generate, generate_one, PhantomConfig};
use semiseg_core::rng::{stream_rng, Stream};
use semiseg_core::trainer::{Mode, TrainConfig, TrainData, Trainer};
use semiseg_core::{Graph, Image, Shape, Tensor};

/// Deterministic xorshift values in [-0.5, 0.5).
fn uniform_tensor(shape: Shape, salt: u64) -> Tensor<f32> {
    let mut z = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..shape.numel())
        .map(|_| {
            z ^= z << 13;
            z ^= z >> 7;
            z ^= z << 17;
            (z >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        })
        .collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

fn conv(c: &mut Criterion) {
    let x = uniform_tensor(Shape::new(8, 16, 64, 64), 1);
    let w = uniform_tensor(Shape::new(16, 16, 3, 3), 2);
    let b = uniform_tensor(Shape::new(1, 1, 1, 16), 3);
    c.bench_function("conv3x3_forward_8x16x64x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (xv, wv, bv) = (
                g.constant(x.clone()),
                g.constant(w.clone()),
                g.constant(b.clone()),
            );
            black_box(g.conv2d(xv, wv, bv).unwrap());
        })
    });
    c.bench_function("conv3x3_forward_backward_8x16x64x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(x.clone().tracked());
            let wv = g.leaf(w.clone().tracked());
            let bv = g.leaf(b.clone().tracked());
            let y = g.conv2d(xv, wv, bv).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            black_box(g.grad(wv).map(|d| d[0]));
        })
    });
}

fn unet(c: &mut Criterion) {
    let cfg = UNetConfig::default();
    let params = ModelParams::<f32>::init(&cfg, &mut stream_rng(0, Stream::Init, 0)).unwrap();
    let x = uniform_tensor(Shape::new(8, 1, 64, 64), 4);
    c.bench_function("unet_predict_8x64x64", |bench| {
        bench.iter(|| black_box(predict(&params, &x).unwrap()))
    });
}

fn augmentation(c: &mut Criterion) {
    let images: Vec<Image> = generate(
        &PhantomConfig {
            seed: 1,
            ..PhantomConfig::default()
        },
        2,
    )
    .unwrap()
    .into_iter()
    .map(|s| s.image)
    .collect();
    let cfg = StrongAugConfig::for_size(64, 64);
    c.bench_function("strong_style_64x64", |bench| {
        bench.iter(|| black_box(strong_style(&images[0], &images[1], &cfg).unwrap()))
    });
    let phantoms = PhantomConfig::default();
    c.bench_function("phantom_generate_64x64", |bench| {
        let mut i = 0;
        bench.iter(|| {
            i += 1;
            black_box(generate_one(&phantoms, i).unwrap())
        })
    });
}

fn train_steps(c: &mut Criterion) {
    let samples = generate(
        &PhantomConfig {
            seed: 2,
            ..PhantomConfig::default()
        },
        32,
    )
    .unwrap();
    let (labeled, rest) = samples.split_at(16);
    let unlabeled: Vec<Image> = rest.iter().map(|s| s.image.clone()).collect();
    let data = TrainData {
        labeled,
        unlabeled: &unlabeled,
    };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for mode in [Mode::Baseline, Mode::SemiThreshold] {
        let config = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        group.bench_function(mode.name(), |bench| {
            bench.iter_batched_ref(
                || Trainer::<f32>::new(config.clone()).unwrap(),
                |t| black_box(t.train_step(&data).unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, conv, unet, augmentation, train_steps);
criterion_main!(benches);
