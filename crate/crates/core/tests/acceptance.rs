//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 4`.
//!
//! MNIST is read from `$MNIST_DIR`, else `<workspace>/data/mnist`.

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dlreg_core::data::{load_idx, BatchPlan, Dataset};
use dlreg_core::experiments::metrics::write_metrics;
use dlreg_core::experiments::{parse_config, run_on_data, ExperimentData, TrainConfig, Trainer};
use dlreg_core::linalg::{frobenius, lstsq, matmul, matmul_tn};
use dlreg_core::nn::{predict, Network};
use dlreg_core::regularizers::{augment_ones, DlRegState, ZPolicy};
use dlreg_core::Matrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Display) -> Verdict {
    Verdict {
        passed,
        detail: detail.to_string(),
    }
}

struct Mnist {
    train: Dataset,
    test: Dataset,
    dir: PathBuf,
}

fn mnist_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("MNIST_DIR") {
        return dir.into();
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn load_mnist() -> Mnist {
    let dir = mnist_dir();
    let load = |images: &str, labels: &str| {
        load_idx(dir.join(images), dir.join(labels)).unwrap_or_else(|e| {
            panic!(
                "MNIST not found or unreadable under {} ({e}); set MNIST_DIR or run scripts/fetch_mnist.sh",
                dir.display()
            )
        })
    };
    Mnist {
        train: load("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        test: load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        dir,
    }
}

impl Mnist {
    fn config(&self, extra: &str) -> TrainConfig {
        parse_config(&format!("data.dir = {}\n{extra}", self.dir.display())).expect("valid acceptance config")
    }

    fn data(&self, config: &TrainConfig) -> ExperimentData {
        ExperimentData::prepare(self.train.clone(), self.test.clone(), config).expect("data prepares")
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Least squares on random fat and tall instances, checked by residuals and
/// against an SVD pseudo-inverse.
fn criterion_1() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut fat_worst, mut orth_worst, mut svd_worst) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let xb = augment_ones(&random_matrix(8, 64, &mut rng));
        let f = random_matrix(8, 10, &mut rng);
        let z = lstsq(xb.xdot(), &f).unwrap();
        fat_worst = fat_worst.max(frobenius(&matmul(xb.xdot(), &z).unwrap().sub(&f).unwrap()));
    }
    for _ in 0..100 {
        let xb = augment_ones(&random_matrix(200, 16, &mut rng));
        let f = random_matrix(200, 10, &mut rng);
        let z = lstsq(xb.xdot(), &f).unwrap();
        let r = matmul(xb.xdot(), &z).unwrap().sub(&f).unwrap();
        orth_worst = orth_worst.max(frobenius(&matmul_tn(xb.xdot(), &r).unwrap()));
        let pinv = to_na(xb.xdot()).pseudo_inverse(1e-12).unwrap();
        svd_worst = svd_worst.max((pinv * to_na(&f) - to_na(&z)).norm());
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        fat_worst < 1e-6 && orth_worst < 1e-6 && svd_worst < 1e-6 && secs < 10.0,
        format!(
            "fat residual {fat_worst:.2e}, tall orthogonality {orth_worst:.2e}, svd gap {svd_worst:.2e}, {secs:.1}s"
        ),
    )
}

enum Penalty {
    None,
    L2(f64),
    DlReg(f64),
}

/// The objective written out directly from the logits, independent of the
/// library's loss code.
fn objective(trainer: &Trainer, x: &Matrix, labels: &[usize], penalty: &Penalty) -> f64 {
    let logits = predict(trainer.network(), x, 64).unwrap();
    let mut ce = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    ce /= labels.len() as f64;
    ce + match penalty {
        Penalty::None => 0.0,
        Penalty::L2(gamma) => {
            let sq: f64 = trainer
                .network()
                .layers()
                .iter()
                .flat_map(|l| l.weights().data())
                .map(|w| w * w)
                .sum();
            0.5 * gamma * sq
        }
        Penalty::DlReg(gamma) => {
            let z = trainer.dlreg_state().unwrap().z();
            let n = x.cols();
            let mut sq = 0.0;
            for r in 0..x.rows() {
                for c in 0..logits.cols() {
                    let mut fit = z.get(n, c);
                    for i in 0..n {
                        fit += x.get(r, i) * z.get(i, c);
                    }
                    sq += (fit - logits.get(r, c)).powi(2);
                }
            }
            gamma * sq
        }
    }
}

fn param(net: &mut Network, flat: usize) -> &mut f64 {
    let mut i = flat;
    for layer in net.layers_mut() {
        let (w, b) = (layer.weights().data().len(), layer.biases().len());
        if i < w {
            return &mut layer.weights_mut().data_mut()[i];
        }
        if i < w + b {
            return &mut layer.biases_mut()[i - w];
        }
        i -= w + b;
    }
    unreachable!()
}

/// Analytic gradients against central differences over every parameter.
fn criterion_2() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Matrix::from_fn(8, 784, |_, _| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..10)).collect();
    let targets = dlreg_core::data::one_hot(&labels, 10).unwrap();
    let other = Matrix::from_fn(8, 784, |_, _| rng.random_range(0.0..1.0));
    let h = 1e-5;
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, reg, penalty) in [
        ("data", "", Penalty::None),
        ("+l2", "reg.kind = l2\nreg.gamma = 5e-4\n", Penalty::L2(5e-4)),
        ("+dlreg", "reg.kind = dlreg\nreg.gamma = 1e-3\nreg.policy = lagged\n", Penalty::DlReg(1e-3)),
    ] {
        let config = parse_config(&format!("net.layers = 784,32,10\ndata.source = synthetic\n{reg}")).unwrap();
        let mut trainer = Trainer::new(&config).unwrap();
        if trainer.dlreg_state().is_some() {
            // A Z fitted on another batch, as the lagged policy would hold.
            let logits = predict(trainer.network(), &other, 64).unwrap();
            let state = trainer.dlreg_state_mut().unwrap();
            state.update_z(&augment_ones(&other), &logits).unwrap();
        }
        let (metrics, grads) = trainer.loss_and_gradients(&x, Some(&targets)).unwrap();
        let analytic = grads.flatten();
        let value_gap = (metrics.total() - objective(&trainer, &x, &labels, &penalty)).abs();
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let p0 = *param(trainer.network_mut(), i);
            *param(trainer.network_mut(), i) = p0 + h;
            let up = objective(&trainer, &x, &labels, &penalty);
            *param(trainer.network_mut(), i) = p0 - h;
            let down = objective(&trainer, &x, &labels, &penalty);
            *param(trainer.network_mut(), i) = p0;
            let n = (up - down) / (2.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
        passed &= worst < 1e-4 && value_gap < 1e-12;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        passed && secs < 120.0,
        format!("max relative error {} over 25450 parameters, {secs:.1}s", parts.join(", ")),
    )
}

/// γ = 0 DL-Reg against no regularizer on MNIST-2k for five epochs.
fn criterion_3(mnist: &Mnist) -> Verdict {
    let base = "net.layers = 784,256,10\ndata.per_class = 200\ntrain.epochs = 5\ntrain.seed = 3\n";
    let plain = mnist.config(base);
    let zero = mnist.config(&format!("{base}reg.kind = dlreg\nreg.gamma = 0\n"));
    let data = mnist.data(&plain);
    let run = |c: &TrainConfig| {
        let mut records = Vec::new();
        let trainer = dlreg_core::experiments::train::run_with(c, &data, |r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        (dlreg_core::experiments::metrics::metrics_csv(&records), trainer.into_network())
    };
    let (csv_a, net_a) = run(&plain);
    let (csv_b, net_b) = run(&zero);
    let same_weights = net_a
        .layers()
        .iter()
        .zip(net_b.layers())
        .all(|(a, b)| {
            a.weights().data().iter().zip(b.weights().data()).all(|(x, y)| x.to_bits() == y.to_bits())
                && a.biases().iter().zip(b.biases()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    verdict(
        csv_a == csv_b && same_weights,
        format!(
            "metrics {}, weights {}",
            if csv_a == csv_b { "identical" } else { "differ" },
            if same_weights { "bitwise identical" } else { "differ" }
        ),
    )
}

/// Penalty on the batch a fresh Z was just solved from.
fn criterion_4(mnist: &Mnist) -> Verdict {
    let net = Network::mlp(&[784, 256, 10], None, 4).unwrap();
    let plan = BatchPlan::new(256, 4, false);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for idx in plan.indices(mnist.train.len(), 0).unwrap().iter().take(20) {
        let x = mnist.train.inputs().select_rows(idx).unwrap();
        let logits = predict(&net, &x, 256).unwrap();
        let batch = augment_ones(&x);
        let mut state = DlRegState::new(784, 10, 1.0, ZPolicy::ClosedFormLagged, 0).unwrap();
        state.update_z(&batch, &logits).unwrap();
        worst = worst.max(state.penalty(&batch, &logits).unwrap().0);
        checked += 1;
    }
    verdict(
        worst < 1e-9,
        format!("largest penalty {worst:.2e} (gamma 1) over {checked} batches of 256"),
    )
}

/// Directional comparison of L2 and DL-Reg on reduced MNIST over three seeds.
fn criterion_5(mnist: &Mnist) -> Verdict {
    let started = Instant::now();
    let base = "net.layers = 784,256,10\ndata.per_class = 2000\ntrain.epochs = 60\neval.train = false\n";
    let (mut l2, mut dl) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let l2_config = mnist.config(&format!("{base}train.seed = {seed}\nreg.kind = l2\nreg.gamma = 5e-4\n"));
        let dl_config = mnist.config(&format!("{base}train.seed = {seed}\nreg.kind = dlreg\nreg.gamma = 1e-12\n"));
        let data = mnist.data(&l2_config);
        let final_acc = |c: &TrainConfig| run_on_data(c, &data).unwrap().last().unwrap().test_accuracy;
        l2.push(final_acc(&l2_config));
        dl.push(final_acc(&dl_config));
        eprintln!("  seed {seed}: l2 {:.2}%  dlreg {:.2}%", l2[seed], dl[seed]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ml2, mdl) = (mean(&l2), mean(&dl));
    let min_dl = dl.iter().cloned().fold(f64::INFINITY, f64::min);
    let mins = started.elapsed().as_secs_f64() / 60.0;
    verdict(
        mdl >= ml2 - 0.3 && min_dl >= 95.0 && mins < 30.0,
        format!("mean test accuracy dlreg {mdl:.2}% vs l2 {ml2:.2}%, lowest dlreg {min_dl:.2}%, {mins:.1} min"),
    )
}

/// Per-epoch training time with and without DL-Reg, reference network, full MNIST.
fn criterion_6(mnist: &Mnist) -> Verdict {
    let base = "train.epochs = 1\neval.train = false\nmetrics.wall_time = true\n";
    let plain = mnist.config(base);
    let dlreg = mnist.config(&format!("{base}reg.kind = dlreg\n"));
    let data = mnist.data(&plain);
    let epoch_ms = |c: &TrainConfig| run_on_data(c, &data).unwrap()[0].wall_time_ms;
    // ABBA order cancels warm-up and linear drift in machine load.
    let mut t_plain = epoch_ms(&plain);
    let mut t_dlreg = epoch_ms(&dlreg);
    t_dlreg += epoch_ms(&dlreg);
    t_plain += epoch_ms(&plain);
    let ratio = t_dlreg / t_plain;
    verdict(
        ratio <= 1.3,
        format!(
            "epoch {:.1}s with dlreg vs {:.1}s without, ratio {ratio:.3}",
            t_dlreg / 2e3,
            t_plain / 2e3
        ),
    )
}

/// Two identical runs must write byte-identical metrics files.
fn criterion_7(mnist: &Mnist) -> Verdict {
    let config = mnist.config(
        "net.layers = 784,128,10\ndata.per_class = 100\ndata.unlabeled_fraction = 0.3\n\
         dropout.enabled = true\nreg.kind = dlreg\ntrain.epochs = 3\ntrain.seed = 11\n",
    );
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let records = run_on_data(&config, &mnist.data(&config)).unwrap();
        let path = dir.path().join(format!("run{run}.csv"));
        write_metrics(&records, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    verdict(
        bytes[0] == bytes[1],
        format!("{} bytes, {}", bytes[0].len(), if bytes[0] == bytes[1] { "identical" } else { "differ" }),
    )
}

/// Penalty-only steps with a frozen Z must not increase the penalty.
fn criterion_8(mnist: &Mnist) -> Verdict {
    let config = mnist.config("net.layers = 784,256,10\nreg.kind = dlreg\nreg.gamma = 1e-3\n");
    let mut trainer = Trainer::new(&config).unwrap();
    let plan = BatchPlan::new(256, 8, false);
    let idx = plan.indices(mnist.train.len(), 0).unwrap();
    let fit_on = mnist.train.inputs().select_rows(&idx[0]).unwrap();
    let unlabeled = mnist.train.inputs().select_rows(&idx[1]).unwrap();
    let logits = predict(trainer.network(), &fit_on, 256).unwrap();
    let state = trainer.dlreg_state_mut().unwrap();
    state.update_z(&augment_ones(&fit_on), &logits).unwrap();
    state.freeze();
    let mut values = Vec::new();
    for _ in 0..50 {
        values.push(trainer.semi_supervised_step(&unlabeled, 1e-3).unwrap().penalty);
    }
    let worst_rise = values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    verdict(
        worst_rise <= 1e-9,
        format!(
            "penalty {:.4e} -> {:.4e} over 50 steps, largest rise {worst_rise:.2e}",
            values[0],
            values[49]
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let enabled = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let needs_mnist = (3..=8).any(enabled);
    let mnist = needs_mnist.then(load_mnist);
    let m = || mnist.as_ref().expect("loaded above");

    type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "least-squares correctness", Box::new(criterion_1)),
        (2, "gradient fidelity", Box::new(criterion_2)),
        (3, "zero-factor identity", Box::new(|| criterion_3(m()))),
        (4, "fat-regime degeneracy", Box::new(|| criterion_4(m()))),
        (5, "desk-scale direction", Box::new(|| criterion_5(m()))),
        (6, "overhead", Box::new(|| criterion_6(m()))),
        (7, "determinism", Box::new(|| criterion_7(m()))),
        (8, "semi-supervised descent", Box::new(|| criterion_8(m()))),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        if !enabled(*n) {
            continue;
        }
        let started = Instant::now();
        let v = check();
        println!(
            "criterion {n} {name}: {} ({}) [{:.1}s]",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
