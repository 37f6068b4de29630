//! Self-checks behind the `check` command. All of them run on synthetic
//! data in well under a second.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{parse_config, TrainConfig};
use super::train::{load_data, run_on_data, run_with, Trainer};
use crate::data::one_hot;
use crate::error::Result;
use crate::linalg::{frobenius, lstsq, matmul, matmul_tn, Matrix};
use crate::nn::{predict, Network};
use crate::regularizers::augment_ones;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn param_mut(net: &mut Network, flat: usize) -> &mut f64 {
    let mut i = flat;
    for layer in net.layers_mut() {
        let w = layer.weights().data().len();
        let b = layer.biases().len();
        if i < w {
            return &mut layer.weights_mut().data_mut()[i];
        }
        if i < w + b {
            return &mut layer.biases_mut()[i - w];
        }
        i -= w + b;
    }
    panic!("parameter index {flat} out of range");
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-6)` between the
/// analytic gradient of the evaluation-mode objective and a central
/// difference with step `h`, over the parameters listed in `indices`
/// (every parameter when `None`).
pub fn gradient_check(
    trainer: &Trainer,
    inputs: &Matrix,
    targets: Option<&Matrix>,
    h: f64,
    indices: Option<&[usize]>,
) -> Result<f64> {
    let analytic = trainer.loss_and_gradients(inputs, targets)?.1.flatten();
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..analytic.len()).collect();
            &all
        }
    };
    let mut probe = trainer.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let p0 = *param_mut(probe.network_mut(), i);
        *param_mut(probe.network_mut(), i) = p0 + h;
        let up = probe.loss_and_gradients(inputs, targets)?.0.total();
        *param_mut(probe.network_mut(), i) = p0 - h;
        let down = probe.loss_and_gradients(inputs, targets)?.0.total();
        *param_mut(probe.network_mut(), i) = p0;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_targets(rows: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    one_hot(&labels, classes)
}

fn tiny_config(extra: &str) -> Result<TrainConfig> {
    parse_config(&format!(
        "net.layers = 12,16,4\n\
         data.source = synthetic\n\
         data.synthetic_train = 96\n\
         data.synthetic_test = 48\n\
         train.batch_size = 16\n\
         train.epochs = 2\n\
         optim.lr = 0.05\n\
         {extra}"
    ))
}

fn outcome(name: &'static str, result: Result<(bool, String)>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn check_lstsq_fat(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = random_matrix(6, 15, rng);
    let f = random_matrix(6, 4, rng);
    let xb = augment_ones(&x);
    let z = lstsq(xb.xdot(), &f)?;
    let rel = frobenius(&matmul(xb.xdot(), &z)?.sub(&f)?) / frobenius(&f);
    Ok((rel < 1e-9, format!("relative residual {rel:.3e}")))
}

fn check_lstsq_tall(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = random_matrix(50, 7, rng);
    let f = random_matrix(50, 3, rng);
    let xb = augment_ones(&x);
    let z = lstsq(xb.xdot(), &f)?;
    let resid = matmul(xb.xdot(), &z)?.sub(&f)?;
    let normal = frobenius(&matmul_tn(xb.xdot(), &resid)?) / frobenius(&f);
    Ok((normal < 1e-9, format!("normal-equation residual {normal:.3e}")))
}

fn check_gradient(reg: &str, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let config = tiny_config(reg)?;
    let mut trainer = Trainer::new(&config)?;
    let x = random_matrix(10, 12, rng);
    let y = random_targets(10, 4, rng)?;
    if trainer.dlreg_state().is_some() {
        // Fit Z on a different batch so the penalty is not trivially zero.
        let other = random_matrix(10, 12, rng);
        let logits = predict(trainer.network(), &other, 64)?;
        let state = trainer.dlreg_state_mut().expect("checked above");
        state.update_z(&augment_ones(&other), &logits)?;
    }
    let err = gradient_check(&trainer, &x, Some(&y), 1e-5, None)?;
    Ok((err < 1e-5, format!("max relative error {err:.3e}")))
}

fn check_gamma_zero(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let plain = tiny_config("")?;
    let zero = tiny_config("reg.kind = dlreg\nreg.gamma = 0\n")?;
    let data = load_data(&plain)?;
    let a = run_on_data(&plain, &data)?;
    let b = run_on_data(&zero, &data)?;
    let net_a = run_with(&plain, &data, |_| Ok(()))?.into_network();
    let net_b = run_with(&zero, &data, |_| Ok(()))?.into_network();
    let same = a == b && net_a == net_b;
    Ok((same, format!("metrics and weights {}", if same { "identical" } else { "differ" })))
}

fn check_determinism(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let config = tiny_config("reg.kind = dlreg\nreg.gamma = 1e-3\ndropout.enabled = true\n")?;
    let data = load_data(&config)?;
    let same = run_on_data(&config, &data)? == run_on_data(&config, &data)?;
    Ok((same, format!("repeat run {}", if same { "identical" } else { "differs" })))
}

fn check_semi_supervised(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let config = tiny_config("reg.kind = dlreg\nreg.gamma = 1\nreg.policy = lagged\noptim.momentum = 0\n")?;
    let mut trainer = Trainer::new(&config)?;
    let x = random_matrix(8, 12, rng);
    let other = random_matrix(8, 12, rng);
    let logits = predict(trainer.network(), &other, 64)?;
    let state = trainer.dlreg_state_mut().expect("dlreg configured");
    state.update_z(&augment_ones(&other), &logits)?;
    state.freeze();
    let mut values = Vec::new();
    for _ in 0..20 {
        values.push(trainer.semi_supervised_step(&x, 1e-3)?.penalty);
    }
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let dropped = values[values.len() - 1] < values[0];
    Ok((
        monotone && dropped,
        format!("penalty {:.4e} -> {:.4e}", values[0], values[values.len() - 1]),
    ))
}

/// Runs every self-check; none of them needs external data.
pub fn run_self_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Check<'a> = &'a dyn Fn(&mut ChaCha8Rng) -> Result<(bool, String)>;
    let checks: [(&str, Check); 8] = [
        ("lstsq_fat_interpolates", &check_lstsq_fat),
        ("lstsq_tall_normal_equations", &check_lstsq_tall),
        ("gradient_data_loss", &|r| check_gradient("", r)),
        ("gradient_l2", &|r| check_gradient("reg.kind = l2\nreg.gamma = 0.01\n", r)),
        ("gradient_dlreg", &|r| check_gradient("reg.kind = dlreg\nreg.gamma = 0.1\nreg.policy = lagged\n", r)),
        ("gamma_zero_identity", &check_gamma_zero),
        ("determinism", &check_determinism),
        ("semi_supervised_descent", &check_semi_supervised),
    ];
    checks.iter().map(|(name, f)| outcome(name, f(&mut rng))).collect()
}
