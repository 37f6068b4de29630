use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dlreg_core::data::{one_hot, synthetic_classification};
use dlreg_core::experiments::{parse_config, Trainer};
use dlreg_core::linalg::{lstsq, matmul};
use dlreg_core::regularizers::augment_ones;
use dlreg_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-0.5..0.5))
}

fn bench_matmul(c: &mut Criterion) {
    let a = noise(256, 784, 1);
    let b = noise(784, 1024, 2);
    c.bench_function("matmul_256x784x1024", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
}

fn bench_lstsq(c: &mut Criterion) {
    let mut group = c.benchmark_group("lstsq");
    // A training batch against MNIST-width inputs is the fat case.
    for &(s, n) in &[(64usize, 784usize), (256, 784), (2000, 32)] {
        let xb = augment_ones(&noise(s, n, 3));
        let f = noise(s, 10, 4);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{s}x{n}")), &(), |bch, _| {
            bch.iter(|| lstsq(black_box(xb.xdot()), black_box(&f)).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let data = synthetic_classification(256, 784, 10, 5).unwrap();
    let targets = one_hot(&data.labels().unwrap(), 10).unwrap();
    let mut group = c.benchmark_group("train_step_784_256_10");
    group.sample_size(20);
    for (name, reg) in [
        ("none", ""),
        ("l2", "reg.kind = l2\n"),
        ("dlreg", "reg.kind = dlreg\n"),
    ] {
        let config = parse_config(&format!("net.layers = 784,256,10\n{reg}")).unwrap();
        let mut trainer = Trainer::new(&config).unwrap();
        group.bench_function(name, |bch| {
            bch.iter(|| trainer.train_step(data.inputs(), &targets, 0.01).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_lstsq, bench_train_step);
criterion_main!(benches);
