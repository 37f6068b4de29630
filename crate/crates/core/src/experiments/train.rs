//! The training driver: one objective `data loss + penalty` per mini-batch,
//! momentum SGD, per-epoch evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DataSource, Regularizer, TrainConfig};
use super::metrics::MetricsRecord;
use crate::data::{load_idx_scaled, reduce_dataset, synthetic_classification, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{backward, forward, predict, softmax_cross_entropy, ForwardCache, Gradients, Mode, Network};
use crate::optim::{ExpSchedule, OptimizerState};
use crate::regularizers::{augment_ones, decoupled_weight_decay, l2_penalty, DlRegState};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1000;

/// Independent streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
enum SeedTag {
    Dropout = 1,
    LinearMap = 2,
    Reduce = 3,
    ReduceTest = 4,
    Unlabeled = 5,
    UnlabeledBatches = 6,
    Synthetic = 7,
}

fn derive_seed(seed: u64, tag: SeedTag) -> u64 {
    seed ^ (tag as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Loss bookkeeping for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    /// Mean cross-entropy over the batch (zero for unlabeled steps).
    pub data_loss: f64,
    /// Penalty value: `γ‖ẊZ − f(X)‖²_F` or `(γ/2)‖w‖²`.
    pub penalty: f64,
    /// Rows whose train-mode prediction matched the target.
    pub correct: usize,
    pub rows: usize,
}

impl StepMetrics {
    /// The objective `J` of the step.
    pub fn total(&self) -> f64 {
        self.data_loss + self.penalty
    }
}

/// Network, optimizer and regularizer state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: Network,
    optim: OptimizerState,
    regularizer: Regularizer,
    dlreg: Option<DlRegState>,
    weight_decay: f64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let net = Network::mlp(&config.layers, config.dropout_rates(), config.seed)?;
        Self::with_network(net, config)
    }

    /// Uses `net` as the starting point instead of a fresh initialization.
    pub fn with_network(net: Network, config: &TrainConfig) -> Result<Self> {
        if net.input_dim() != config.layers[0] || net.output_dim() != *config.layers.last().expect("validated") {
            return Err(Error::config("net.layers", "network does not match the configured widths"));
        }
        let o = &config.optim;
        let schedule = ExpSchedule::new(o.lr, o.decay, o.period)?;
        let optim = OptimizerState::new(&net, o.momentum, schedule)?;
        let dlreg = match config.regularizer {
            Regularizer::DlReg { gamma, policy } => Some(DlRegState::new(
                net.input_dim(),
                net.output_dim(),
                gamma,
                policy,
                derive_seed(config.seed, SeedTag::LinearMap),
            )?),
            _ => None,
        };
        Ok(Self {
            net,
            optim,
            regularizer: config.regularizer,
            dlreg,
            weight_decay: o.weight_decay,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedTag::Dropout)),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optim
    }

    pub fn dlreg_state(&self) -> Option<&DlRegState> {
        self.dlreg.as_ref()
    }

    pub fn dlreg_state_mut(&mut self) -> Option<&mut DlRegState> {
        self.dlreg.as_mut()
    }

    pub fn regularizer(&self) -> Regularizer {
        self.regularizer
    }

    fn dlreg_active(&self) -> bool {
        self.dlreg.as_ref().is_some_and(|s| s.gamma() > 0.0)
    }

    /// Objective and parameter gradients for a cached forward pass, with the
    /// current `Z` held fixed.
    fn objective(
        &self,
        inputs: &Matrix,
        cache: &ForwardCache,
        targets: Option<&Matrix>,
    ) -> Result<(StepMetrics, Gradients)> {
        let logits = cache.logits();
        let mut metrics = StepMetrics {
            rows: inputs.rows(),
            ..StepMetrics::default()
        };
        let mut grad_logits = match targets {
            Some(t) => {
                let (loss, grad) = softmax_cross_entropy(logits, t)?;
                metrics.data_loss = loss;
                let truth = t.argmax_rows();
                metrics.correct = logits
                    .argmax_rows()
                    .iter()
                    .zip(&truth)
                    .filter(|(p, t)| p == t)
                    .count();
                grad
            }
            None => Matrix::zeros(logits.rows(), logits.cols()),
        };
        if self.dlreg_active() {
            let state = self.dlreg.as_ref().expect("active implies present");
            let (value, grad) = state.penalty(&augment_ones(inputs), logits)?;
            metrics.penalty += value;
            grad_logits.axpy(1.0, &grad)?;
        }
        let mut grads = backward(&self.net, cache, &grad_logits)?;
        if let Regularizer::L2 { gamma } = self.regularizer {
            if gamma > 0.0 {
                let (value, g) = l2_penalty(&self.net, gamma)?;
                metrics.penalty += value;
                grads.axpy(1.0, &g)?;
            }
        }
        Ok((metrics, grads))
    }

    /// Objective `J` and its gradient in evaluation mode (no dropout, no
    /// parameter or `Z` change). A DL-Reg `Z` must already be fitted.
    pub fn loss_and_gradients(&self, inputs: &Matrix, targets: Option<&Matrix>) -> Result<(StepMetrics, Gradients)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = forward(&self.net, inputs, Mode::Eval, &mut rng)?;
        self.objective(inputs, &cache, targets)
    }

    fn apply(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.optim.step(&mut self.net, grads, lr)?;
        if self.weight_decay > 0.0 {
            decoupled_weight_decay(&mut self.net, self.weight_decay, lr)?;
        }
        Ok(())
    }

    /// One optimizer step on a labeled batch. With DL-Reg the penalty uses the
    /// `Z` fitted on earlier batches; `Z` is refitted to this batch's outputs
    /// after the parameter update. The very first step fits `Z` up front.
    pub fn train_step(&mut self, inputs: &Matrix, targets: &Matrix, lr: f64) -> Result<StepMetrics> {
        let cache = forward(&self.net, inputs, Mode::Train, &mut self.rng)?;
        let mut refit = None;
        if self.dlreg_active() {
            let batch = augment_ones(inputs);
            let state = self.dlreg.as_mut().expect("active implies present");
            if state.is_initialized() {
                refit = Some(batch);
            } else {
                state.update_z(&batch, cache.logits())?;
            }
        }
        let (metrics, grads) = self.objective(inputs, &cache, Some(targets))?;
        if !metrics.total().is_finite() {
            return Err(Error::Numerical(format!("objective diverged to {}", metrics.total())));
        }
        self.apply(&grads, lr)?;
        if let Some(batch) = refit {
            let state = self.dlreg.as_mut().expect("active implies present");
            state.update_z(&batch, cache.logits())?;
        }
        Ok(metrics)
    }

    /// One optimizer step driven only by the DL-Reg penalty on an unlabeled
    /// batch. Returns the penalty before the update.
    pub fn semi_supervised_step(&mut self, inputs: &Matrix, lr: f64) -> Result<StepMetrics> {
        let Some(state) = self.dlreg.as_mut() else {
            return Err(Error::config(
                "reg.kind",
                "semi-supervised steps need the dlreg regularizer",
            ));
        };
        if state.gamma() == 0.0 {
            return Ok(StepMetrics {
                rows: inputs.rows(),
                ..StepMetrics::default()
            });
        }
        let cache = forward(&self.net, inputs, Mode::Train, &mut self.rng)?;
        let batch = augment_ones(inputs);
        let state = self.dlreg.as_mut().expect("checked above");
        let fresh = !state.is_initialized();
        if fresh {
            state.update_z(&batch, cache.logits())?;
        }
        let (metrics, grads) = self.objective(inputs, &cache, None)?;
        if !metrics.penalty.is_finite() {
            return Err(Error::Numerical("penalty diverged".into()));
        }
        self.apply(&grads, lr)?;
        if !fresh {
            self.dlreg
                .as_mut()
                .expect("checked above")
                .update_z(&batch, cache.logits())?;
        }
        Ok(metrics)
    }
}

/// Accuracy in percent (argmax, ties to the lowest class) and mean
/// cross-entropy of the network in evaluation mode.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<(f64, f64)> {
    let targets = dataset
        .targets()
        .ok_or_else(|| Error::InvalidInput("cannot evaluate on an unlabeled dataset".into()))?;
    let logits = predict(net, dataset.inputs(), EVAL_CHUNK)?;
    let (loss, _) = softmax_cross_entropy(&logits, targets)?;
    let predicted = logits.argmax_rows();
    let truth = targets.argmax_rows();
    let correct = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok((100.0 * correct as f64 / dataset.len() as f64, loss))
}

/// Training, test and optional unlabeled data for a run.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    pub unlabeled: Option<Dataset>,
}

impl ExperimentData {
    /// Applies the reduction and unlabeled split of `config` to full datasets.
    pub fn prepare(train: Dataset, test: Dataset, config: &TrainConfig) -> Result<Self> {
        let dc = &config.data;
        let train = match dc.per_class {
            Some(k) => reduce_dataset(&train, k, derive_seed(config.seed, SeedTag::Reduce))?,
            None => train,
        };
        let test = match dc.test_per_class {
            Some(k) => reduce_dataset(&test, k, derive_seed(config.seed, SeedTag::ReduceTest))?,
            None => test,
        };
        let (train, unlabeled) =
            train.split_unlabeled(dc.unlabeled_fraction, derive_seed(config.seed, SeedTag::Unlabeled))?;
        let data = Self { train, test, unlabeled };
        data.check_against(config)?;
        Ok(data)
    }

    fn check_against(&self, config: &TrainConfig) -> Result<()> {
        let n = config.layers[0];
        let c = *config.layers.last().expect("validated");
        for (name, d) in [("training", &self.train), ("test", &self.test)] {
            if d.input_dim() != n || d.class_count() != c {
                return Err(Error::config(
                    "net.layers",
                    format!(
                        "{name} data has {} inputs and {} classes, network is {n} -> {c}",
                        d.input_dim(),
                        d.class_count()
                    ),
                ));
            }
        }
        if config.batch_size > self.train.len() {
            return Err(Error::config(
                "train.batch_size",
                format!("{} exceeds the {} training rows", config.batch_size, self.train.len()),
            ));
        }
        Ok(())
    }
}

/// Loads (or generates) the datasets named by `config`.
pub fn load_data(config: &TrainConfig) -> Result<ExperimentData> {
    let (train, test) = match &config.data.source {
        DataSource::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx_scaled(train_images, train_labels, config.data.scaling)?,
            load_idx_scaled(test_images, test_labels, config.data.scaling)?,
        ),
        DataSource::Synthetic { train, test } => {
            let n = config.layers[0];
            let c = *config.layers.last().expect("validated");
            let all = synthetic_classification(train + test, n, c, derive_seed(config.seed, SeedTag::Synthetic))?;
            let idx: Vec<usize> = (0..train + test).collect();
            (all.subset(&idx[..*train])?, all.subset(&idx[*train..])?)
        }
    };
    ExperimentData::prepare(train, test, config)
}

/// Endless batches over the unlabeled pool. When the pool is exhausted it is
/// reshuffled under a fresh stream.
struct UnlabeledStream<'a> {
    data: &'a Dataset,
    plan: &'a BatchPlan,
    stream: usize,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> UnlabeledStream<'a> {
    fn new(data: &'a Dataset, plan: &'a BatchPlan, epoch: usize) -> Result<Self> {
        // Spread epochs apart so passes within an epoch never reuse a stream.
        let stream = epoch.wrapping_mul(1 << 20);
        Ok(Self {
            data,
            plan,
            stream,
            pending: plan.indices(data.len(), stream)?.into_iter(),
        })
    }

    fn next_batch(&mut self) -> Result<Matrix> {
        let idx = match self.pending.next() {
            Some(idx) => idx,
            None => {
                self.stream += 1;
                self.pending = self.plan.indices(self.data.len(), self.stream)?.into_iter();
                self.pending.next().expect("pool is non-empty")
            }
        };
        self.data.inputs().select_rows(&idx)
    }
}

/// Trains for `config.epochs` epochs, handing each record to `on_epoch` as
/// soon as it is complete.
pub fn run_with(
    config: &TrainConfig,
    data: &ExperimentData,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Trainer> {
    data.check_against(config)?;
    let mut trainer = Trainer::new(config)?;
    let plan = BatchPlan::new(config.batch_size, config.seed, config.drop_last);
    let unlabeled_plan = data.unlabeled.as_ref().map(|u| {
        BatchPlan::new(
            config.batch_size.min(u.len()),
            derive_seed(config.seed, SeedTag::UnlabeledBatches),
            false,
        )
    });
    let schedule = *trainer.optimizer().schedule();
    let train_targets = data.train.targets().expect("training data is labeled");
    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch);
        let started = Instant::now();
        let mut unlabeled_batches = match (&data.unlabeled, &unlabeled_plan) {
            (Some(u), Some(p)) => Some(UnlabeledStream::new(u, p, epoch)?),
            _ => None,
        };
        let (mut loss_sum, mut penalty_sum, mut steps, mut correct) = (0.0, 0.0, 0usize, 0usize);
        for idx in plan.indices(data.train.len(), epoch)? {
            let inputs = data.train.inputs().select_rows(&idx)?;
            let targets = train_targets.select_rows(&idx)?;
            let m = trainer.train_step(&inputs, &targets, lr)?;
            loss_sum += m.total();
            penalty_sum += m.penalty;
            correct += m.correct;
            steps += 1;
            if let Some(ub) = unlabeled_batches.as_mut() {
                let batch = ub.next_batch()?;
                trainer.semi_supervised_step(&batch, lr)?;
            }
        }
        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        let train_accuracy = if config.eval_train {
            evaluate(trainer.network(), &data.train)?.0
        } else {
            100.0 * correct as f64 / data.train.len() as f64
        };
        let (test_accuracy, _) = evaluate(trainer.network(), &data.test)?;
        let steps = steps.max(1) as f64;
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_accuracy,
            test_accuracy,
            train_loss: loss_sum / steps,
            penalty_value: penalty_sum / steps,
            lr,
            wall_time_ms: if config.record_wall_time { elapsed_ms } else { 0.0 },
        };
        on_epoch(&record)?;
    }
    Ok(trainer)
}

/// Runs on already loaded data and collects every record.
pub fn run_on_data(config: &TrainConfig, data: &ExperimentData) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::with_capacity(config.epochs);
    run_with(config, data, |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok(records)
}

/// Loads the configured data and trains.
pub fn run_experiment(config: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    let data = load_data(config)?;
    run_on_data(config, &data)
}
