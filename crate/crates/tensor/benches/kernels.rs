//! Parallel vs sequential kernel comparison.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use multiface_tensor::exec::{set_exec_mode, ExecMode};
use multiface_tensor::kernels;
use rand::Rng;

fn data(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = multiface_tensor::rng::derive_rng(seed, &[0]);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let (m, k, n) = (256, 256, 256);
    let a = data(m * k, 1);
    let b = data(k * n, 2);
    let mut group = c.benchmark_group("matmul_256");
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |bch, &mode| {
            set_exec_mode(mode);
            let mut out = vec![0.0; m * n];
            bch.iter(|| {
                kernels::matmul(black_box(&a), black_box(&b), m, k, n, &mut out);
                black_box(&out);
            });
        });
    }
    group.finish();
    set_exec_mode(ExecMode::Parallel);
}

fn bench_conv(c: &mut Criterion) {
    let (b, h, w, cin, cout) = (8, 14, 14, 96, 64);
    let x = data(b * h * w * cin, 3);
    let wts = data(9 * cin * cout, 4);
    let mut group = c.benchmark_group("conv3x3_14x14x96");
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |bch, &mode| {
            set_exec_mode(mode);
            let mut cols = vec![0.0; b * h * w * 9 * cin];
            let mut y = vec![0.0; b * h * w * cout];
            bch.iter(|| {
                kernels::im2col_3x3(black_box(&x), b, h, w, cin, &mut cols);
                kernels::matmul(&cols, black_box(&wts), b * h * w, 9 * cin, cout, &mut y);
                black_box(&y);
            });
        });
    }
    group.finish();
    set_exec_mode(ExecMode::Parallel);
}

fn bench_batch_matmul(c: &mut Criterion) {
    // window-attention shaped: many small slices
    let (bs, m, k, n) = (192, 49, 32, 49);
    let a = data(bs * m * k, 5);
    let b = data(bs * n * k, 6);
    let mut group = c.benchmark_group("attention_scores_192x49x32");
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |bch, &mode| {
            set_exec_mode(mode);
            let mut out = vec![0.0; bs * m * n];
            bch.iter(|| {
                kernels::batch_matmul_tb(black_box(&a), black_box(&b), bs, m, k, n, &mut out);
                black_box(&out);
            });
        });
    }
    group.finish();
    set_exec_mode(ExecMode::Parallel);
}

criterion_group!(benches, bench_matmul, bench_conv, bench_batch_matmul);
criterion_main!(benches);
