//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, keys are dotted. Every key is
//! optional; the defaults reproduce the reference MNIST protocol:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `net.layers` | `784,1024,1024,2048,10` | layer widths, input first |
//! | `dropout.enabled` | `false` | inverted dropout on layer inputs |
//! | `dropout.input` | `0.2` | rate on the network inputs |
//! | `dropout.hidden` | `0.5` | rate on every hidden activation |
//! | `reg.kind` | `none` | `none`, `l2` or `dlreg` |
//! | `reg.gamma` | `5e-4` (l2), `1e-12` (dlreg) | regularization factor |
//! | `reg.policy` | `ema` | `ema` or `lagged` linear-map refresh |
//! | `reg.beta` | `0.1` | EMA weight of the newest closed-form map |
//! | `optim.lr` | `0.1` | base learning rate |
//! | `optim.momentum` | `0.9` | heavy-ball momentum |
//! | `optim.decay` | `0.96` | learning-rate decay factor |
//! | `optim.period` | `30` | epochs between decays |
//! | `optim.weight_decay` | `0` | decoupled weight decay λ |
//! | `train.batch_size` | `256` | mini-batch size |
//! | `train.epochs` | `1200` | epochs |
//! | `train.seed` | `0` | seed for init, shuffling, dropout, reduction |
//! | `train.drop_last` | `false` | drop the final short batch |
//! | `data.source` | `mnist` | `mnist` or `synthetic` |
//! | `data.dir` | `data/mnist` | directory holding the four IDX files |
//! | `data.train_images` | `<data.dir>/train-images-idx3-ubyte` | |
//! | `data.train_labels` | `<data.dir>/train-labels-idx1-ubyte` | |
//! | `data.test_images` | `<data.dir>/t10k-images-idx3-ubyte` | |
//! | `data.test_labels` | `<data.dir>/t10k-labels-idx1-ubyte` | |
//! | `data.per_class` | unset | class-balanced training subset size per class |
//! | `data.test_per_class` | unset | same for the test set |
//! | `data.unlabeled_fraction` | `0` | share of training rows used without labels |
//! | `data.scaling` | `unit` | `unit` (`/255`) or `raw` pixels |
//! | `data.synthetic_train` | `512` | synthetic training rows |
//! | `data.synthetic_test` | `256` | synthetic test rows |
//! | `eval.train` | `true` | evaluate the full training set every epoch |
//! | `metrics.wall_time` | `false` | record wall-clock times (makes CSVs run-dependent) |
//! | `compare.l2_gamma` | `5e-4` | L2 factor for the `compare` arms |
//! | `compare.dlreg_gamma` | `1e-12` | DL-Reg factor for the `compare` arms |
//! | `compare.parallel` | `true` | run the four arms on separate threads |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::Scaling;
use crate::error::{Error, Result};
use crate::regularizers::ZPolicy;

pub const DEFAULT_L2_GAMMA: f64 = 5e-4;
pub const DEFAULT_DLREG_GAMMA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub input: f64,
    pub hidden: f64,
}

/// The additive penalty of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    None,
    L2 { gamma: f64 },
    DlReg { gamma: f64, policy: ZPolicy },
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::L2 { .. } => "l2",
            Regularizer::DlReg { .. } => "dlreg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub decay: f64,
    pub period: usize,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Linearly labeled uniform inputs; width and classes follow `net.layers`.
    Synthetic { train: usize, test: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub unlabeled_fraction: f64,
    pub scaling: Scaling,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareConfig {
    pub l2_gamma: f64,
    pub dlreg_gamma: f64,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layers: Vec<usize>,
    pub dropout: Option<Dropout>,
    pub regularizer: Regularizer,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub drop_last: bool,
    pub data: DataConfig,
    pub eval_train: bool,
    pub record_wall_time: bool,
    pub compare: CompareConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        parse_config("").expect("defaults are valid")
    }
}

const KEYS: &[&str] = &[
    "net.layers",
    "dropout.enabled",
    "dropout.input",
    "dropout.hidden",
    "reg.kind",
    "reg.gamma",
    "reg.policy",
    "reg.beta",
    "optim.lr",
    "optim.momentum",
    "optim.decay",
    "optim.period",
    "optim.weight_decay",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "train.drop_last",
    "data.source",
    "data.dir",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "data.per_class",
    "data.test_per_class",
    "data.unlabeled_fraction",
    "data.scaling",
    "data.synthetic_train",
    "data.synthetic_test",
    "eval.train",
    "metrics.wall_time",
    "compare.l2_gamma",
    "compare.dlreg_gamma",
    "compare.parallel",
];

/// Every recognized key, in documentation order.
pub fn known_keys() -> &'static [&'static str] {
    KEYS
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("expected {what}, got `{v}`"))),
        }
    }

    fn real(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parsed::<f64>(key, "a real number")?.unwrap_or(default);
        if !v.is_finite() {
            return Err(Error::config(key, "must be finite"));
        }
        Ok(v)
    }

    fn count(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parsed(key, "a non-negative integer")?.unwrap_or(default))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.parsed(key, "`true` or `false`")?.unwrap_or(default))
    }

    fn path(&self, key: &str, default: PathBuf) -> Result<PathBuf> {
        match self.raw(key) {
            None => Ok(default),
            Some("") => Err(Error::config(key, "dataset path is empty")),
            Some(v) => Ok(PathBuf::from(v)),
        }
    }
}

/// Parses the `key = value` format described in the module docs.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::config(key, "key given more than once"));
        }
    }
    let e = Entries(map);

    let layers = match e.raw("net.layers") {
        None => vec![784, 1024, 1024, 2048, 10],
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::config("net.layers", format!("expected comma-separated sizes, got `{v}`")))?,
    };
    if layers.len() < 2 || layers.contains(&0) {
        return Err(Error::config("net.layers", "need at least two positive sizes"));
    }

    let dropout = if e.flag("dropout.enabled", false)? {
        let input = e.real("dropout.input", 0.2)?;
        let hidden = e.real("dropout.hidden", 0.5)?;
        for (key, rate) in [("dropout.input", input), ("dropout.hidden", hidden)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(key, format!("must be in [0, 1), got {rate}")));
            }
        }
        Some(Dropout { input, hidden })
    } else {
        e.real("dropout.input", 0.2)?;
        e.real("dropout.hidden", 0.5)?;
        None
    };

    let policy = match e.raw("reg.policy").unwrap_or("ema") {
        "ema" => {
            let beta = e.real("reg.beta", 0.1)?;
            if !(beta > 0.0 && beta <= 1.0) {
                return Err(Error::config("reg.beta", format!("must be in (0, 1], got {beta}")));
            }
            ZPolicy::Ema { beta }
        }
        "lagged" => {
            e.real("reg.beta", 0.1)?;
            ZPolicy::ClosedFormLagged
        }
        other => return Err(Error::config("reg.policy", format!("expected `ema` or `lagged`, got `{other}`"))),
    };
    let kind = e.raw("reg.kind").unwrap_or("none");
    let gamma_default = match kind {
        "l2" => DEFAULT_L2_GAMMA,
        _ => DEFAULT_DLREG_GAMMA,
    };
    let gamma = e.real("reg.gamma", gamma_default)?;
    if gamma < 0.0 {
        return Err(Error::config("reg.gamma", format!("must be >= 0, got {gamma}")));
    }
    let regularizer = match kind {
        "none" => Regularizer::None,
        "l2" => Regularizer::L2 { gamma },
        "dlreg" => Regularizer::DlReg { gamma, policy },
        other => {
            return Err(Error::config(
                "reg.kind",
                format!("expected `none`, `l2` or `dlreg`, got `{other}`"),
            ))
        }
    };

    let optim = OptimConfig {
        lr: e.real("optim.lr", 0.1)?,
        momentum: e.real("optim.momentum", 0.9)?,
        decay: e.real("optim.decay", 0.96)?,
        period: e.count("optim.period", 30)?,
        weight_decay: e.real("optim.weight_decay", 0.0)?,
    };
    if optim.lr <= 0.0 {
        return Err(Error::config("optim.lr", "must be > 0"));
    }
    if !(0.0..1.0).contains(&optim.momentum) {
        return Err(Error::config("optim.momentum", "must be in [0, 1)"));
    }
    if !(optim.decay > 0.0 && optim.decay <= 1.0) {
        return Err(Error::config("optim.decay", "must be in (0, 1]"));
    }
    if optim.period == 0 {
        return Err(Error::config("optim.period", "must be >= 1"));
    }
    if optim.weight_decay < 0.0 {
        return Err(Error::config("optim.weight_decay", "must be >= 0"));
    }

    let batch_size = e.count("train.batch_size", 256)?;
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be >= 1"));
    }
    let epochs = e.count("train.epochs", 1200)?;
    if epochs == 0 {
        return Err(Error::config("train.epochs", "must be >= 1"));
    }

    let dir = e.path("data.dir", PathBuf::from("data/mnist"))?;
    let mnist = DataSource::Mnist {
        train_images: e.path("data.train_images", dir.join("train-images-idx3-ubyte"))?,
        train_labels: e.path("data.train_labels", dir.join("train-labels-idx1-ubyte"))?,
        test_images: e.path("data.test_images", dir.join("t10k-images-idx3-ubyte"))?,
        test_labels: e.path("data.test_labels", dir.join("t10k-labels-idx1-ubyte"))?,
    };
    let synthetic_train = e.count("data.synthetic_train", 512)?;
    let synthetic_test = e.count("data.synthetic_test", 256)?;
    let source = match e.raw("data.source").unwrap_or("mnist") {
        "mnist" => mnist,
        "synthetic" => {
            if synthetic_train == 0 || synthetic_test == 0 {
                return Err(Error::config("data.synthetic_train", "synthetic set sizes must be >= 1"));
            }
            DataSource::Synthetic {
                train: synthetic_train,
                test: synthetic_test,
            }
        }
        other => {
            return Err(Error::config(
                "data.source",
                format!("expected `mnist` or `synthetic`, got `{other}`"),
            ))
        }
    };
    let per_class = e.parsed::<usize>("data.per_class", "a positive integer")?;
    let test_per_class = e.parsed::<usize>("data.test_per_class", "a positive integer")?;
    for (key, v) in [("data.per_class", per_class), ("data.test_per_class", test_per_class)] {
        if v == Some(0) {
            return Err(Error::config(key, "must be >= 1"));
        }
    }
    let unlabeled_fraction = e.real("data.unlabeled_fraction", 0.0)?;
    if !(0.0..1.0).contains(&unlabeled_fraction) {
        return Err(Error::config("data.unlabeled_fraction", "must be in [0, 1)"));
    }
    if unlabeled_fraction > 0.0 && !matches!(regularizer, Regularizer::DlReg { .. }) {
        return Err(Error::config(
            "data.unlabeled_fraction",
            "unlabeled rows can only be used with reg.kind = dlreg",
        ));
    }
    let scaling = match e.raw("data.scaling").unwrap_or("unit") {
        "unit" => Scaling::Unit,
        "raw" => Scaling::Raw,
        other => return Err(Error::config("data.scaling", format!("expected `unit` or `raw`, got `{other}`"))),
    };

    let compare = CompareConfig {
        l2_gamma: e.real("compare.l2_gamma", DEFAULT_L2_GAMMA)?,
        dlreg_gamma: e.real("compare.dlreg_gamma", DEFAULT_DLREG_GAMMA)?,
        parallel: e.flag("compare.parallel", true)?,
    };
    if compare.l2_gamma < 0.0 || compare.dlreg_gamma < 0.0 {
        return Err(Error::config("compare.l2_gamma", "factors must be >= 0"));
    }

    Ok(TrainConfig {
        layers,
        dropout,
        regularizer,
        optim,
        batch_size,
        epochs,
        seed: e.count("train.seed", 0)? as u64,
        drop_last: e.flag("train.drop_last", false)?,
        data: DataConfig {
            source,
            per_class,
            test_per_class,
            unlabeled_fraction,
            scaling,
        },
        eval_train: e.flag("eval.train", true)?,
        record_wall_time: e.flag("metrics.wall_time", false)?,
        compare,
    })
}

impl TrainConfig {
    /// Serializes every setting so that `parse_config(&c.to_text()) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let layers: Vec<String> = self.layers.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "net.layers = {}", layers.join(","));
        let d = self.dropout.unwrap_or(Dropout { input: 0.2, hidden: 0.5 });
        let _ = writeln!(s, "dropout.enabled = {}", self.dropout.is_some());
        let _ = writeln!(s, "dropout.input = {:e}", d.input);
        let _ = writeln!(s, "dropout.hidden = {:e}", d.hidden);
        let _ = writeln!(s, "reg.kind = {}", self.regularizer.name());
        match self.regularizer {
            Regularizer::None => {}
            Regularizer::L2 { gamma } => {
                let _ = writeln!(s, "reg.gamma = {gamma:e}");
            }
            Regularizer::DlReg { gamma, policy } => {
                let _ = writeln!(s, "reg.gamma = {gamma:e}");
                match policy {
                    ZPolicy::ClosedFormLagged => {
                        let _ = writeln!(s, "reg.policy = lagged");
                    }
                    ZPolicy::Ema { beta } => {
                        let _ = writeln!(s, "reg.policy = ema");
                        let _ = writeln!(s, "reg.beta = {beta:e}");
                    }
                }
            }
        }
        let o = &self.optim;
        let _ = writeln!(s, "optim.lr = {:e}", o.lr);
        let _ = writeln!(s, "optim.momentum = {:e}", o.momentum);
        let _ = writeln!(s, "optim.decay = {:e}", o.decay);
        let _ = writeln!(s, "optim.period = {}", o.period);
        let _ = writeln!(s, "optim.weight_decay = {:e}", o.weight_decay);
        let _ = writeln!(s, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train.epochs = {}", self.epochs);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        let _ = writeln!(s, "train.drop_last = {}", self.drop_last);
        match &self.data.source {
            DataSource::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let _ = writeln!(s, "data.source = mnist");
                let _ = writeln!(s, "data.train_images = {}", train_images.display());
                let _ = writeln!(s, "data.train_labels = {}", train_labels.display());
                let _ = writeln!(s, "data.test_images = {}", test_images.display());
                let _ = writeln!(s, "data.test_labels = {}", test_labels.display());
            }
            DataSource::Synthetic { train, test } => {
                let _ = writeln!(s, "data.source = synthetic");
                let _ = writeln!(s, "data.synthetic_train = {train}");
                let _ = writeln!(s, "data.synthetic_test = {test}");
            }
        }
        if let Some(k) = self.data.per_class {
            let _ = writeln!(s, "data.per_class = {k}");
        }
        if let Some(k) = self.data.test_per_class {
            let _ = writeln!(s, "data.test_per_class = {k}");
        }
        let _ = writeln!(s, "data.unlabeled_fraction = {:e}", self.data.unlabeled_fraction);
        let scaling = match self.data.scaling {
            Scaling::Unit => "unit",
            Scaling::Raw => "raw",
        };
        let _ = writeln!(s, "data.scaling = {scaling}");
        let _ = writeln!(s, "eval.train = {}", self.eval_train);
        let _ = writeln!(s, "metrics.wall_time = {}", self.record_wall_time);
        let _ = writeln!(s, "compare.l2_gamma = {:e}", self.compare.l2_gamma);
        let _ = writeln!(s, "compare.dlreg_gamma = {:e}", self.compare.dlreg_gamma);
        let _ = writeln!(s, "compare.parallel = {}", self.compare.parallel);
        s
    }

    pub fn dropout_rates(&self) -> Option<(f64, f64)> {
        self.dropout.map(|d| (d.input, d.hidden))
    }
}
