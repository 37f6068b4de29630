// The hand-unrolled oracle reads best with explicit indices.
#![allow(clippy::needless_range_loop)]

use dlreg_core::data::{one_hot, synthetic_classification, BatchPlan, Dataset};
use dlreg_core::experiments::metrics::metrics_csv;
use dlreg_core::experiments::{evaluate, load_data, parse_config, run_on_data, Trainer};
use dlreg_core::nn::{Activation, DenseLayer, Network};
use dlreg_core::{Error, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M2 = [[f64; 2]; 2];

fn relu_net(w: M2, b: [f64; 2]) -> Network {
    let layer = DenseLayer::new(Matrix::from_rows(&w).unwrap(), b.to_vec(), Activation::Relu, 0.0).unwrap();
    Network::new(vec![layer]).unwrap()
}

/// Minimum-norm solution of `[x 1] z = a` for a 2-row batch, written out
/// with an explicit 2×2 inverse.
fn min_norm_z(x: M2, a: M2) -> [[f64; 2]; 3] {
    let xd = [[x[0][0], x[0][1], 1.0], [x[1][0], x[1][1], 1.0]];
    let dot = |i: usize, j: usize| (0..3).map(|k| xd[i][k] * xd[j][k]).sum::<f64>();
    let (g00, g01, g11) = (dot(0, 0), dot(0, 1), dot(1, 1));
    let det = g00 * g11 - g01 * g01;
    let inv = [[g11 / det, -g01 / det], [-g01 / det, g00 / det]];
    let mut s = [[0.0; 2]; 2];
    for i in 0..2 {
        for c in 0..2 {
            s[i][c] = inv[i][0] * a[0][c] + inv[i][1] * a[1][c];
        }
    }
    let mut z = [[0.0; 2]; 3];
    for k in 0..3 {
        for c in 0..2 {
            z[k][c] = xd[0][k] * s[0][c] + xd[1][k] * s[1][c];
        }
    }
    z
}

struct Unrolled {
    w: M2,
    b: [f64; 2],
    vw: M2,
    vb: [f64; 2],
}

/// One heavy-ball step of `mean CE + γ‖[x 1]z − relu(xw + b)‖²` by hand.
/// Returns the post-activation outputs and the penalty value.
fn hand_step(s: &mut Unrolled, x: M2, labels: [usize; 2], z: &[[f64; 2]; 3], gamma: f64, lr: f64, mu: f64) -> (M2, f64) {
    let mut pre = [[0.0; 2]; 2];
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            pre[r][c] = x[r][0] * s.w[0][c] + x[r][1] * s.w[1][c] + s.b[c];
            out[r][c] = pre[r][c].max(0.0);
        }
    }
    let mut g = [[0.0; 2]; 2];
    let mut penalty = 0.0;
    for r in 0..2 {
        let m = out[r][0].max(out[r][1]);
        let e = [(out[r][0] - m).exp(), (out[r][1] - m).exp()];
        for c in 0..2 {
            let p = e[c] / (e[0] + e[1]);
            let y = if labels[r] == c { 1.0 } else { 0.0 };
            let fit = x[r][0] * z[0][c] + x[r][1] * z[1][c] + z[2][c];
            let resid = out[r][c] - fit;
            penalty += gamma * resid * resid;
            let grad_out = (p - y) / 2.0 + 2.0 * gamma * resid;
            g[r][c] = if pre[r][c] > 0.0 { grad_out } else { 0.0 };
        }
    }
    for i in 0..2 {
        for c in 0..2 {
            let gw = x[0][i] * g[0][c] + x[1][i] * g[1][c];
            s.vw[i][c] = mu * s.vw[i][c] + gw;
            s.w[i][c] -= lr * s.vw[i][c];
        }
    }
    for c in 0..2 {
        s.vb[c] = mu * s.vb[c] + g[0][c] + g[1][c];
        s.b[c] -= lr * s.vb[c];
    }
    (out, penalty)
}

#[test]
fn two_steps_match_hand_unroll() {
    let (gamma, lr, mu) = (1.0, 0.1, 0.9);
    let w0 = [[0.3, -0.2], [0.1, 0.4]];
    let b0 = [0.05, -0.1];
    let x1 = [[0.5, -1.0], [1.5, 0.25]];
    let x2 = [[-0.75, 0.5], [1.0, 2.0]];
    let (l1, l2) = ([0, 1], [1, 0]);

    let config = parse_config(
        "net.layers = 2,2\ndata.source = synthetic\nreg.kind = dlreg\nreg.gamma = 1\nreg.policy = lagged\n",
    )
    .unwrap();
    let mut trainer = Trainer::with_network(relu_net(w0, b0), &config).unwrap();
    let m1 = Matrix::from_rows(&x1).unwrap();
    let m2 = Matrix::from_rows(&x2).unwrap();
    let first = trainer.train_step(&m1, &one_hot(&l1, 2).unwrap(), lr).unwrap();
    let second = trainer.train_step(&m2, &one_hot(&l2, 2).unwrap(), lr).unwrap();

    // Step one fits Z to its own batch first, so its penalty vanishes.
    let mut s = Unrolled {
        w: w0,
        b: b0,
        vw: [[0.0; 2]; 2],
        vb: [0.0; 2],
    };
    let mut out1 = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out1[r][c] = (x1[r][0] * w0[0][c] + x1[r][1] * w0[1][c] + b0[c]).max(0.0);
        }
    }
    let z1 = min_norm_z(x1, out1);
    let (_, p1) = hand_step(&mut s, x1, l1, &z1, gamma, lr, mu);
    // Step two penalizes with the lagged Z, then Z is refitted to batch two.
    let (out2, p2) = hand_step(&mut s, x2, l2, &z1, gamma, lr, mu);
    let z2 = min_norm_z(x2, out2);

    assert!(first.penalty.abs() < 1e-20 && p1.abs() < 1e-20);
    assert!(p2 > 1e-3, "lagged penalty should be active, got {p2}");
    assert!((second.penalty - p2).abs() < 1e-10);

    let layer = &trainer.network().layers()[0];
    for i in 0..2 {
        for c in 0..2 {
            assert!((layer.weights().get(i, c) - s.w[i][c]).abs() < 1e-10);
        }
        assert!((layer.biases()[i] - s.b[i]).abs() < 1e-10);
    }
    let z = trainer.dlreg_state().unwrap().z();
    for k in 0..3 {
        for c in 0..2 {
            assert!((z.get(k, c) - z2[k][c]).abs() < 1e-10, "Z[{k}][{c}]");
        }
    }
}

fn tiny(extra: &str) -> dlreg_core::experiments::TrainConfig {
    parse_config(&format!(
        "net.layers = 10,16,4\n\
         data.source = synthetic\n\
         data.synthetic_train = 120\n\
         data.synthetic_test = 60\n\
         train.batch_size = 24\n\
         train.epochs = 3\n\
         optim.lr = 0.05\n\
         {extra}"
    ))
    .unwrap()
}

#[test]
fn gamma_zero_matches_unregularized_bitwise() {
    let plain = tiny("");
    let data = load_data(&plain).unwrap();
    let a = run_on_data(&plain, &data).unwrap();
    let b = run_on_data(&tiny("reg.kind = dlreg\nreg.gamma = 0\n"), &data).unwrap();
    let c = run_on_data(&tiny("reg.kind = l2\nreg.gamma = 0\n"), &data).unwrap();
    assert_eq!(metrics_csv(&a), metrics_csv(&b));
    assert_eq!(metrics_csv(&a), metrics_csv(&c));
    assert!(b.iter().all(|r| r.penalty_value == 0.0));
}

#[test]
fn disabled_regularizer_settings_do_not_leak_into_dropout_runs() {
    let base = tiny("dropout.enabled = true\nreg.kind = none\n");
    let data = load_data(&base).unwrap();
    let a = run_on_data(&base, &data).unwrap();
    let noisy = tiny(
        "dropout.enabled = true\nreg.kind = none\nreg.gamma = 3\nreg.beta = 0.7\ncompare.l2_gamma = 1\ncompare.dlreg_gamma = 1\n",
    );
    assert_eq!(a, run_on_data(&noisy, &data).unwrap());
}

#[test]
fn same_config_same_bytes() {
    let config = tiny("dropout.enabled = true\nreg.kind = dlreg\nreg.gamma = 1e-3\ndata.unlabeled_fraction = 0.25\n");
    let once = metrics_csv(&dlreg_core::experiments::run_experiment(&config).unwrap());
    let twice = metrics_csv(&dlreg_core::experiments::run_experiment(&config).unwrap());
    assert_eq!(once, twice);
}

#[test]
fn one_epoch_gives_one_finite_record() {
    let mut config = tiny("");
    config.epochs = 1;
    let records = dlreg_core::experiments::run_experiment(&config).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert_eq!(r.epoch, 1);
    for v in [r.train_accuracy, r.test_accuracy, r.train_loss, r.penalty_value, r.lr, r.wall_time_ms] {
        assert!(v.is_finite());
    }
    assert!((0.0..=100.0).contains(&r.train_accuracy) && (0.0..=100.0).contains(&r.test_accuracy));
}

#[test]
fn recorded_loss_splits_into_replayed_data_loss_and_penalty() {
    for reg in ["reg.kind = l2\nreg.gamma = 0.01\n", "reg.kind = dlreg\nreg.gamma = 1e-2\n"] {
        let config = tiny(reg);
        let data = load_data(&config).unwrap();
        let records = run_on_data(&config, &data).unwrap();

        // Replay the same steps and accumulate only the data loss.
        let mut trainer = Trainer::new(&config).unwrap();
        let plan = BatchPlan::new(config.batch_size, config.seed, config.drop_last);
        let targets = data.train.targets().unwrap();
        for (epoch, r) in records.iter().enumerate() {
            let batches = plan.indices(data.train.len(), epoch).unwrap();
            let mut data_loss = 0.0;
            for idx in &batches {
                let x = data.train.inputs().select_rows(idx).unwrap();
                let y = targets.select_rows(idx).unwrap();
                data_loss += trainer.train_step(&x, &y, r.lr).unwrap().data_loss;
            }
            data_loss /= batches.len() as f64;
            assert!(r.penalty_value > 0.0);
            assert!((r.train_loss - (data_loss + r.penalty_value)).abs() < 1e-9, "{reg} epoch {}", r.epoch);
        }
    }
}

#[test]
fn wall_time_is_recorded_only_on_request() {
    let data = load_data(&tiny("")).unwrap();
    assert!(run_on_data(&tiny(""), &data).unwrap().iter().all(|r| r.wall_time_ms == 0.0));
    let timed = run_on_data(&tiny("metrics.wall_time = true\n"), &data).unwrap();
    assert!(timed.iter().all(|r| r.wall_time_ms > 0.0));
}

#[test]
fn evaluate_perfect_and_constant_predictors() {
    let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
    let targets = one_hot(&labels, 10).unwrap();
    let data = Dataset::from_labels(targets.clone(), &labels, 10).unwrap();

    let identity = DenseLayer::new(Matrix::identity(10), vec![0.0; 10], Activation::Identity, 0.0).unwrap();
    let net = Network::new(vec![identity]).unwrap();
    assert_eq!(evaluate(&net, &data).unwrap().0, 100.0);

    let constant = DenseLayer::new(Matrix::zeros(10, 10), vec![0.0; 10], Activation::Identity, 0.0).unwrap();
    let net = Network::new(vec![constant]).unwrap();
    let (acc, loss) = evaluate(&net, &data).unwrap();
    assert_eq!(acc, 10.0);
    assert!((loss - 10f64.ln()).abs() < 1e-12);

    assert!(matches!(evaluate(&net, &data.without_targets()), Err(Error::InvalidInput(_))));
}

#[test]
fn evaluate_matches_row_by_row_recount() {
    let data = synthetic_classification(333, 12, 5, 9).unwrap();
    let net = Network::mlp(&[12, 20, 5], None, 4).unwrap();
    let (acc, _) = evaluate(&net, &data).unwrap();

    let labels = data.labels().unwrap();
    let mut hits = 0;
    for (r, &label) in labels.iter().enumerate() {
        let mut h: Vec<f64> = data.inputs().row(r).to_vec();
        for layer in net.layers() {
            let w = layer.weights();
            let mut next = layer.biases().to_vec();
            for (j, v) in next.iter_mut().enumerate() {
                for (i, &hi) in h.iter().enumerate() {
                    *v += hi * w.get(i, j);
                }
                if layer.activation() == Activation::Relu {
                    *v = v.max(0.0);
                }
            }
            h = next;
        }
        let mut best = 0;
        for j in 1..h.len() {
            if h[j] > h[best] {
                best = j;
            }
        }
        hits += usize::from(best == label);
    }
    assert_eq!(acc, 100.0 * hits as f64 / labels.len() as f64);
}

#[test]
fn semi_supervised_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Matrix::from_fn(6, 10, |_, _| rng.random_range(-1.0..1.0));

    let mut plain = Trainer::new(&tiny("")).unwrap();
    assert!(matches!(plain.semi_supervised_step(&x, 0.1), Err(Error::Config { .. })));

    let mut zero = Trainer::new(&tiny("reg.kind = dlreg\nreg.gamma = 0\n")).unwrap();
    let before = zero.network().clone();
    zero.semi_supervised_step(&x, 0.1).unwrap();
    assert_eq!(zero.network(), &before);

    // A linear network that already equals its fitted map gets no gradient.
    // Small dyadic values keep every product exact.
    let config = parse_config("net.layers = 2,2\ndata.source = synthetic\nreg.kind = dlreg\nreg.gamma = 1\n").unwrap();
    let w = [[0.5, -0.25], [0.75, 1.0]];
    let b = [0.125, -0.5];
    let layer = DenseLayer::new(Matrix::from_rows(&w).unwrap(), b.to_vec(), Activation::Identity, 0.0).unwrap();
    let mut linear = Trainer::with_network(Network::new(vec![layer]).unwrap(), &config).unwrap();
    let z = Matrix::from_rows(&[w[0], w[1], b]).unwrap();
    let state = linear.dlreg_state_mut().unwrap();
    *state = dlreg_core::regularizers::DlRegState::with_z(z, 1.0, state.policy()).unwrap();
    state.freeze();
    let before = linear.network().clone();
    let xs = Matrix::from_rows(&[[1.0, 0.5], [-2.0, 0.25], [0.0, 4.0]]).unwrap();
    let m = linear.semi_supervised_step(&xs, 0.1).unwrap();
    assert_eq!(m.penalty, 0.0);
    assert_eq!(linear.network(), &before);
}
