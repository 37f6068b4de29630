//! Runs against the real MNIST files; see the acceptance suite for lookup.

use std::path::PathBuf;

use dlreg_core::data::{load_idx, load_idx_scaled, Scaling};
use dlreg_core::experiments::{parse_config, run_experiment};

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn standard_split_loads() {
    let dir = mnist_dir();
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))
        .unwrap_or_else(|e| panic!("MNIST missing under {}: {e}", dir.display()));
    assert_eq!(test.len(), 10_000);
    assert_eq!(test.input_dim(), 784);
    let x = test.inputs().data();
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(x.contains(&1.0));
    let mut counts = [0usize; 10];
    for k in test.labels().unwrap() {
        counts[k] += 1;
    }
    assert!(counts.iter().all(|&c| c > 800), "{counts:?}");

    let raw = load_idx_scaled(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"), Scaling::Raw).unwrap();
    assert_eq!(raw.inputs().get(0, 400), 255.0 * test.inputs().get(0, 400));
}

#[test]
fn tiny_gamma_penalty_is_positive_where_zero_gamma_is_exactly_zero() {
    let dir = mnist_dir();
    let base = format!(
        "data.dir = {}\nnet.layers = 784,64,10\ndata.per_class = 200\ndata.test_per_class = 50\n\
         train.epochs = 2\nreg.kind = dlreg\n",
        dir.display()
    );
    let tiny = run_experiment(&parse_config(&format!("{base}reg.gamma = 1e-12\n")).unwrap()).unwrap();
    let zero = run_experiment(&parse_config(&format!("{base}reg.gamma = 0\n")).unwrap()).unwrap();
    assert!(tiny.iter().all(|r| r.penalty_value > 0.0));
    assert!(zero.iter().all(|r| r.penalty_value == 0.0));
}
