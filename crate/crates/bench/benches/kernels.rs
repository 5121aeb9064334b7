//! Micro-benchmarks for the numeric kernels on the training hot path.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dann_core::layers::{Conv2d, Mode, ResidualBlock};
use dann_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let numel: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rand_param(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let numel: usize = shape.iter().product();
    Tensor::param(
        shape.to_vec(),
        (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rand_tensor(&[512, 256], &mut rng);
    let b = rand_tensor(&[256, 128], &mut rng);
    c.bench_function("matmul_512x256x128_f32", |bench| {
        bench.iter(|| black_box(a.matmul(&b).unwrap()))
    });
}

fn bench_conv_forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let conv = Conv2d::<f32>::new(16, 32, 3, 1, 1, &mut rng);
    let x = rand_param(&[32, 16, 16, 16], &mut rng);
    c.bench_function("conv2d_fwd_bwd_32x16x16x16", |bench| {
        bench.iter_batched(
            || x.clone(),
            |x| {
                let y = conv.forward(&x).unwrap().mean();
                y.backward().unwrap();
                black_box(y.item())
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_residual_block(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let block = ResidualBlock::<f32>::new(32, 64, 2, &mut rng);
    let x = rand_param(&[32, 32, 8, 8], &mut rng);
    c.bench_function("residual_block_fwd_bwd", |bench| {
        bench.iter_batched(
            || x.clone(),
            |x| {
                let y = block.forward(&x, Mode::Train).unwrap().mean();
                y.backward().unwrap();
                black_box(y.item())
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(kernels, bench_matmul, bench_conv_forward_backward, bench_residual_block);
criterion_main!(kernels);
