//! Heavy-ball SGD and a stepwise exponential learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Network};

/// `lr(e) = base_lr · decay^⌊e / period⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpSchedule {
    base_lr: f64,
    decay: f64,
    period_epochs: usize,
}

impl ExpSchedule {
    pub fn new(base_lr: f64, decay: f64, period_epochs: usize) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::config("optim.lr", format!("must be > 0, got {base_lr}")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config("optim.decay", format!("must be in (0, 1], got {decay}")));
        }
        if period_epochs == 0 {
            return Err(Error::config("optim.period", "must be >= 1"));
        }
        Ok(Self {
            base_lr,
            decay,
            period_epochs,
        })
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.period_epochs) as i32;
        self.base_lr * self.decay.powi(steps)
    }
}

/// Free-function form of [`ExpSchedule::lr_at`].
pub fn lr_at(sched: &ExpSchedule, epoch: usize) -> f64 {
    sched.lr_at(epoch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Gradients,
    momentum: f64,
    schedule: ExpSchedule,
}

impl OptimizerState {
    pub fn new(net: &Network, momentum: f64, schedule: ExpSchedule) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("optim.momentum", format!("must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            velocity: Gradients::zeros_like(net),
            momentum,
            schedule,
        })
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn schedule(&self) -> &ExpSchedule {
        &self.schedule
    }

    /// `v ← μ·v + g; p ← p − lr·v`.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config("optim.lr", format!("must be > 0, got {lr}")));
        }
        if !grads.matches(net) || !self.velocity.matches(net) {
            return Err(Error::shape("gradients or velocity do not match the network"));
        }
        let mu = self.momentum;
        for ((layer, g), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity.layers)
        {
            let params = layer.weights_mut().data_mut().iter_mut();
            let vel = v.weights.data_mut().iter_mut().zip(g.weights.data());
            for (p, (v, &g)) in params.zip(vel) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
            let vel = v.biases.iter_mut().zip(&g.biases);
            for (p, (v, &g)) in layer.biases_mut().iter_mut().zip(vel) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    state.step(net, grads, lr)
}
