//! Fully-connected networks: ReLU/identity layers, inverted dropout on each
//! layer's input, softmax cross-entropy, and backpropagation.
//!
//! Weights are stored `in_dim × out_dim` so a batch `x` (rows are samples)
//! maps to `x · W + b`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Matrix,
    biases: Vec<f64>,
    activation: Activation,
    /// Probability of zeroing each input unit of this layer in train mode.
    dropout_rate: f64,
}

impl DenseLayer {
    pub fn new(
        weights: Matrix,
        biases: Vec<f64>,
        activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self> {
        if biases.len() != weights.cols() {
            return Err(Error::shape(format!(
                "{} biases for a layer with {} outputs",
                biases.len(),
                weights.cols()
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(
                "dropout",
                format!("rate must be in [0, 1), got {dropout_rate}"),
            ));
        }
        Ok(Self {
            weights,
            biases,
            activation,
            dropout_rate,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("net.layers", "network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {k} outputs {} units but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.biases.len())
            .sum()
    }

    /// ReLU hidden layers and an identity output layer. `dropout` gives the
    /// (input, hidden) rates; the input rate applies to the network inputs and
    /// the hidden rate to every hidden activation.
    pub fn mlp(sizes: &[usize], dropout: Option<(f64, f64)>, seed: u64) -> Result<Self> {
        let layers = sizes.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        let rates: Vec<f64> = match dropout {
            Some((input, hidden)) => (0..layers)
                .map(|k| if k == 0 { input } else { hidden })
                .collect(),
            None => vec![0.0; layers],
        };
        init_network(sizes, &activations, &rates, seed)
    }
}

/// Builds a network from layer sizes `[n, h1, .., c]` with He-uniform weights
/// (`U(-√(6/fan_in), √(6/fan_in))`) and zero biases.
pub fn init_network(
    sizes: &[usize],
    activations: &[Activation],
    dropout_rates: &[f64],
    seed: u64,
) -> Result<Network> {
    if sizes.len() < 2 {
        return Err(Error::config(
            "net.layers",
            format!("need at least input and output sizes, got {sizes:?}"),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::config("net.layers", format!("layer sizes must be positive, got {sizes:?}")));
    }
    let n_layers = sizes.len() - 1;
    if activations.len() != n_layers || dropout_rates.len() != n_layers {
        return Err(Error::config(
            "net.layers",
            format!(
                "{n_layers} layers need {n_layers} activations and dropout rates, got {} and {}",
                activations.len(),
                dropout_rates.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
        let limit = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let weights = Matrix::from_fn(fan_in, fan_out, |_, _| dist.sample(&mut rng));
        layers.push(DenseLayer::new(
            weights,
            vec![0.0; fan_out],
            activations[k],
            dropout_rates[k],
        )?);
    }
    Network::new(layers)
}

/// Intermediate values of one layer from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Layer input after dropout.
    pub input: Matrix,
    /// Scaled keep-mask (`0` or `1/(1-rate)`); `None` means all ones.
    pub mask: Option<Matrix>,
    pub pre_activation: Matrix,
    pub post_activation: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn logits(&self) -> &Matrix {
        &self.layers[self.layers.len() - 1].post_activation
    }

    pub fn into_logits(mut self) -> Matrix {
        self.layers.pop().expect("cache is never empty").post_activation
    }
}

pub fn forward<R: Rng + ?Sized>(
    net: &Network,
    x: &Matrix,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardCache> {
    if x.cols() != net.input_dim() {
        return Err(Error::shape(format!(
            "input has {} features, network expects {}",
            x.cols(),
            net.input_dim()
        )));
    }
    let mut caches: Vec<LayerCache> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let prev = caches.last().map_or(x, |c| &c.post_activation);
        let (input, mask) = if mode == Mode::Train && layer.dropout_rate > 0.0 {
            let keep = 1.0 / (1.0 - layer.dropout_rate);
            let mask = Matrix::from_fn(prev.rows(), prev.cols(), |_, _| {
                if rng.random::<f64>() < layer.dropout_rate {
                    0.0
                } else {
                    keep
                }
            });
            (prev.zip_with(&mask, |a, m| a * m)?, Some(mask))
        } else {
            (prev.clone(), None)
        };
        let mut pre = matmul(&input, &layer.weights)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&layer.biases) {
                *v += b;
            }
        }
        let post = match layer.activation {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::Identity => pre.clone(),
        };
        caches.push(LayerCache {
            input,
            mask,
            pre_activation: pre,
            post_activation: post,
        });
    }
    Ok(ForwardCache { layers: caches })
}

/// Evaluation-mode outputs, processed in row chunks to bound memory.
pub fn predict(net: &Network, x: &Matrix, chunk: usize) -> Result<Matrix> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(x.rows() * net.output_dim());
    // Eval mode never draws from the generator.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    let mut start = 0;
    while start < x.rows() {
        let end = (start + chunk).min(x.rows());
        let rows: Vec<usize> = (start..end).collect();
        let part = x.select_rows(&rows)?;
        let cache = forward(net, &part, Mode::Eval, &mut eval_rng)?;
        out.extend_from_slice(cache.logits().data());
        start = end;
    }
    Matrix::from_vec(x.rows(), net.output_dim(), out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Checks that every row has a single 1 and zeros elsewhere; returns the hot indices.
pub fn one_hot_classes(targets: &Matrix) -> Result<Vec<usize>> {
    (0..targets.rows())
        .map(|r| {
            let row = targets.row(r);
            let mut hot = None;
            for (j, &v) in row.iter().enumerate() {
                if v == 1.0 && hot.is_none() {
                    hot = Some(j);
                } else if v != 0.0 {
                    hot = None;
                    break;
                }
            }
            hot.ok_or_else(|| Error::InvalidTarget(format!("row {r} is not one-hot")))
        })
        .collect()
}

/// Mean cross-entropy of `softmax(logits)` against one-hot `targets`, with its
/// gradient `(softmax(logits) - targets) / rows`.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let classes = one_hot_classes(targets)?;
    let rows = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &k) in classes.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[k] - max);
        let g = grad.row_mut(r);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp() / sum / rows;
        }
        g[k] -= 1.0 / rows;
    }
    Ok((loss / rows, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// Per-layer parameter gradients, shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: Matrix::zeros(l.in_dim(), l.out_dim()),
                    biases: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("gradient layer counts differ"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.axpy(alpha, &b.weights)?;
            if a.biases.len() != b.biases.len() {
                return Err(Error::shape("bias gradient lengths differ"));
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    /// All gradient entries in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub(crate) fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.shape() == l.weights.shape() && g.biases.len() == l.biases.len()
            })
    }
}

/// Backpropagates `grad_logits` through the cached forward pass, replaying
/// its dropout masks.
pub fn backward(net: &Network, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Gradients> {
    if cache.layers.len() != net.layers.len() {
        return Err(Error::InvalidState(format!(
            "cache has {} layers, network has {}",
            cache.layers.len(),
            net.layers.len()
        )));
    }
    if grad_logits.shape() != cache.logits().shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} vs logits {:?}",
            grad_logits.shape(),
            cache.logits().shape()
        )));
    }
    let mut grads = Vec::with_capacity(net.layers.len());
    let mut upstream = grad_logits.clone();
    for (k, (layer, lc)) in net.layers.iter().zip(&cache.layers).enumerate().rev() {
        if lc.input.cols() != layer.in_dim() || lc.pre_activation.cols() != layer.out_dim() {
            return Err(Error::InvalidState(format!("cache does not match layer {k}")));
        }
        let delta = match layer.activation {
            Activation::Relu => lc
                .pre_activation
                .zip_with(&upstream, |z, g| if z > 0.0 { g } else { 0.0 })?,
            Activation::Identity => upstream,
        };
        let dw = matmul_tn(&lc.input, &delta)?;
        let mut db = vec![0.0; layer.out_dim()];
        for r in 0..delta.rows() {
            for (b, d) in db.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        grads.push(LayerGradients {
            weights: dw,
            biases: db,
        });
        if k > 0 {
            let mut dx = matmul_nt(&delta, &layer.weights)?;
            if let Some(mask) = &lc.mask {
                dx = dx.zip_with(mask, |g, m| g * m)?;
            }
            upstream = dx;
        } else {
            upstream = delta;
        }
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}
