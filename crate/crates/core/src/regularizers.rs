//! Penalties added to the data loss: the linearity penalty `γ‖ẊZ − f(X)‖²_F`
//! with its closed-form linear map `Z`, plus the L2 and decoupled weight-decay
//! baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, lstsq, matmul, Matrix};
use crate::nn::{Gradients, Network};

/// Inputs with an appended all-ones column (`s × (n+1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    xdot: Matrix,
}

impl AugmentedBatch {
    pub fn xdot(&self) -> &Matrix {
        &self.xdot
    }

    /// Batch size `s`.
    pub fn len(&self) -> usize {
        self.xdot.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Input width `n` (without the ones column).
    pub fn input_dim(&self) -> usize {
        self.xdot.cols() - 1
    }
}

pub fn augment_ones(x: &Matrix) -> AugmentedBatch {
    let (rows, cols) = x.shape();
    let mut data = Vec::with_capacity(rows * (cols + 1));
    for r in 0..rows {
        data.extend_from_slice(x.row(r));
        data.push(1.0);
    }
    AugmentedBatch {
        xdot: Matrix::from_vec(rows, cols + 1, data).expect("augmented shape is consistent"),
    }
}

/// How `Z` follows the network between steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZPolicy {
    /// Replace `Z` by the latest batch's closed-form solution.
    ClosedFormLagged,
    /// `Z ← (1−β)·Z + β·Z*`.
    Ema { beta: f64 },
}

impl Default for ZPolicy {
    fn default() -> Self {
        ZPolicy::Ema { beta: 0.1 }
    }
}

fn validate(gamma: f64, policy: ZPolicy) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::config("reg.gamma", format!("must be finite and >= 0, got {gamma}")));
    }
    if let ZPolicy::Ema { beta } = policy {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::config("reg.beta", format!("must be in (0, 1], got {beta}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DlRegState {
    z: Matrix,
    gamma: f64,
    policy: ZPolicy,
    initialized: bool,
    frozen: bool,
}

impl DlRegState {
    /// State for a network with `input_dim` inputs and `output_dim` outputs.
    /// `Z` starts as a small random placeholder and is only used once the
    /// first closed-form solve has replaced it.
    pub fn new(input_dim: usize, output_dim: usize, gamma: f64, policy: ZPolicy, seed: u64) -> Result<Self> {
        validate(gamma, policy)?;
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::shape("linear map needs positive dimensions"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = 1.0 / ((input_dim + 1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let z = Matrix::from_fn(input_dim + 1, output_dim, |_, _| dist.sample(&mut rng));
        Ok(Self {
            z,
            gamma,
            policy,
            initialized: false,
            frozen: false,
        })
    }

    /// A state whose `Z` is given and already counts as initialized.
    pub fn with_z(z: Matrix, gamma: f64, policy: ZPolicy) -> Result<Self> {
        validate(gamma, policy)?;
        if z.rows() < 2 {
            return Err(Error::shape("Z needs at least one input row and the bias row"));
        }
        Ok(Self {
            z,
            gamma,
            policy,
            initialized: true,
            frozen: false,
        })
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn policy(&self) -> ZPolicy {
        self.policy
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops `update_z` from changing `Z`.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    fn check_shapes(&self, batch: &AugmentedBatch, outputs: &Matrix) -> Result<()> {
        if batch.xdot.cols() != self.z.rows() {
            return Err(Error::shape(format!(
                "augmented batch has {} columns, Z has {} rows",
                batch.xdot.cols(),
                self.z.rows()
            )));
        }
        if outputs.rows() != batch.len() || outputs.cols() != self.z.cols() {
            return Err(Error::shape(format!(
                "outputs {:?} do not match batch of {} and Z width {}",
                outputs.shape(),
                batch.len(),
                self.z.cols()
            )));
        }
        Ok(())
    }

    /// `γ‖ẊZ − outputs‖²_F` and its gradient `2γ(outputs − ẊZ)` with respect
    /// to `outputs`. `Z` is held constant.
    pub fn penalty(&self, batch: &AugmentedBatch, outputs: &Matrix) -> Result<(f64, Matrix)> {
        if !self.initialized {
            return Err(Error::InvalidState("linear map Z has not been fitted yet".into()));
        }
        self.check_shapes(batch, outputs)?;
        if self.gamma == 0.0 {
            return Ok((0.0, Matrix::zeros(outputs.rows(), outputs.cols())));
        }
        let fit = matmul(&batch.xdot, &self.z)?;
        let residual = outputs.sub(&fit)?;
        let value = self.gamma * frobenius_sq(&residual);
        let grad = residual.scale(2.0 * self.gamma);
        Ok((value, grad))
    }

    /// Refits `Z` to `outputs` on this batch according to the policy. The
    /// first fit always takes the closed-form solution as is.
    pub fn update_z(&mut self, batch: &AugmentedBatch, outputs: &Matrix) -> Result<()> {
        self.check_shapes(batch, outputs)?;
        if self.frozen && self.initialized {
            return Ok(());
        }
        let fresh = lstsq(&batch.xdot, outputs)?;
        if !fresh.is_finite() {
            return Err(Error::Numerical("closed-form linear map is not finite".into()));
        }
        match (self.initialized, self.policy) {
            (false, _) | (true, ZPolicy::ClosedFormLagged) => self.z = fresh,
            (true, ZPolicy::Ema { beta }) => {
                self.z = self.z.zip_with(&fresh, |old, new| (1.0 - beta) * old + beta * new)?;
            }
        }
        self.initialized = true;
        Ok(())
    }
}

/// `(γ/2)·Σ w²` over all weights (biases excluded) and its gradient `γ·w`.
pub fn l2_penalty(net: &Network, gamma: f64) -> Result<(f64, Gradients)> {
    if !(gamma >= 0.0) {
        return Err(Error::config("reg.gamma", format!("must be >= 0, got {gamma}")));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut sum = 0.0;
    for (g, layer) in grads.layers.iter_mut().zip(net.layers()) {
        sum += frobenius_sq(layer.weights());
        g.weights = layer.weights().scale(gamma);
    }
    Ok((0.5 * gamma * sum, grads))
}

/// Shrinks every weight by `1 − lr·λ`; biases are untouched.
pub fn decoupled_weight_decay(net: &mut Network, lambda: f64, lr: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::config("optim.weight_decay", format!("must be >= 0, got {lambda}")));
    }
    if !(lr > 0.0) {
        return Err(Error::config("optim.lr", format!("must be > 0, got {lr}")));
    }
    if lambda == 0.0 {
        return Ok(());
    }
    let factor = 1.0 - lr * lambda;
    for layer in net.layers_mut() {
        for w in layer.weights_mut().data_mut() {
            *w *= factor;
        }
    }
    Ok(())
}
