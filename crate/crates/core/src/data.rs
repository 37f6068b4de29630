//! Datasets: IDX (MNIST) ingestion, one-hot targets, class-balanced
//! reduction, shuffled mini-batches, and synthetic linear problems.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::nn::one_hot_classes;
use crate::regularizers::augment_ones;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

/// How raw pixel bytes map to reals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    /// `byte / 255`, in `[0, 1]`.
    #[default]
    Unit,
    /// The byte value itself, in `[0, 255]`.
    Raw,
}

/// Inputs `X` (`m × n`) with optional one-hot targets `Y` (`m × c`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    targets: Option<Matrix>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Option<Matrix>, class_count: usize) -> Result<Self> {
        if !inputs.is_finite() {
            return Err(Error::InvalidInput("dataset inputs must be finite".into()));
        }
        if class_count == 0 {
            return Err(Error::InvalidInput("class count must be positive".into()));
        }
        if let Some(t) = &targets {
            if t.shape() != (inputs.rows(), class_count) {
                return Err(Error::shape(format!(
                    "targets {:?} do not match {} rows and {class_count} classes",
                    t.shape(),
                    inputs.rows()
                )));
            }
            one_hot_classes(t)?;
        }
        Ok(Self {
            inputs,
            targets,
            class_count,
        })
    }

    /// Labeled dataset from class indices.
    pub fn from_labels(inputs: Matrix, labels: &[usize], class_count: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Consistency(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.rows()
            )));
        }
        let targets = one_hot(labels, class_count)?;
        Self::new(inputs, Some(targets), class_count)
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> Option<&Matrix> {
        self.targets.as_ref()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_labeled(&self) -> bool {
        self.targets.is_some()
    }

    /// Class index of every row, or `None` when unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.targets
            .as_ref()
            .map(|t| one_hot_classes(t).expect("targets validated on construction"))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            inputs: self.inputs.select_rows(indices)?,
            targets: self.targets.as_ref().map(|t| t.select_rows(indices)).transpose()?,
            class_count: self.class_count,
        })
    }

    /// Same inputs with the targets dropped.
    pub fn without_targets(&self) -> Dataset {
        Dataset {
            inputs: self.inputs.clone(),
            targets: None,
            class_count: self.class_count,
        }
    }

    /// Randomly splits off `fraction` of the rows as an unlabeled dataset.
    /// Returns `(labeled, unlabeled)`; `unlabeled` is `None` when no row moves.
    pub fn split_unlabeled(&self, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(
                "data.unlabeled_fraction",
                format!("must be in [0, 1), got {fraction}"),
            ));
        }
        let m = self.len();
        let n_unlabeled = ((m as f64) * fraction).floor() as usize;
        if n_unlabeled == 0 {
            return Ok((self.clone(), None));
        }
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (unl, lab) = idx.split_at(n_unlabeled);
        let mut lab = lab.to_vec();
        let mut unl = unl.to_vec();
        lab.sort_unstable();
        unl.sort_unstable();
        Ok((self.subset(&lab)?, Some(self.subset(&unl)?.without_targets())))
    }
}

pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Matrix> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("no labels".into()));
    }
    let mut t = Matrix::zeros(labels.len(), class_count);
    for (r, &k) in labels.iter().enumerate() {
        if k >= class_count {
            return Err(Error::InvalidTarget(format!(
                "label {k} at row {r} is out of range for {class_count} classes"
            )));
        }
        t.set(r, k, 1.0);
    }
    Ok(t)
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("file truncated: {what}")),
    )
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX3 image file; returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(truncated(path, "magic"));
    }
    let magic = read_u32(bytes, 0);
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected image magic {IMAGES_MAGIC}, found {magic}"),
        });
    }
    if bytes.len() < 16 {
        return Err(truncated(path, "header"));
    }
    let count = read_u32(bytes, 4) as usize;
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("empty image set {count}x{rows}x{cols}"),
        });
    }
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(truncated(path, &format!("{} of {need} pixel bytes", payload.len())));
    }
    Ok((count, rows, cols, payload[..need].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 4 {
        return Err(truncated(path, "magic"));
    }
    let magic = read_u32(bytes, 0);
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected label magic {LABELS_MAGIC}, found {magic}"),
        });
    }
    if bytes.len() < 8 {
        return Err(truncated(path, "header"));
    }
    let count = read_u32(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(truncated(path, &format!("{} of {count} labels", payload.len())));
    }
    Ok(payload[..count].to_vec())
}

/// Loads an IDX image/label pair with pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_scaled(images_path, labels_path, Scaling::Unit)
}

pub fn load_idx_scaled(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    scaling: Scaling,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (count, rows, cols, pixels) = parse_idx_images(ip, &read_file(ip)?)?;
    let labels = parse_idx_labels(lp, &read_file(lp)?)?;
    if labels.len() != count {
        return Err(Error::Consistency(format!(
            "{} has {count} images but {} has {} labels",
            ip.display(),
            lp.display(),
            labels.len()
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= MNIST_CLASSES) {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            msg: format!("label {l} at index {i} is not a digit"),
        });
    }
    let scale = match scaling {
        Scaling::Unit => 1.0 / 255.0,
        Scaling::Raw => 1.0,
    };
    let data = pixels.iter().map(|&p| p as f64 * scale).collect();
    let inputs = Matrix::from_vec(count, rows * cols, data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    Dataset::from_labels(inputs, &labels, MNIST_CLASSES)
}

/// Samples `per_class` rows of every class without replacement, shuffled together.
pub fn reduce_dataset(d: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let labels = d
        .labels()
        .ok_or_else(|| Error::InvalidInput("cannot reduce an unlabeled dataset by class".into()))?;
    if per_class == 0 {
        return Err(Error::config("data.per_class", "must be >= 1"));
    }
    let mut by_class = vec![Vec::new(); d.class_count()];
    for (i, &k) in labels.iter().enumerate() {
        by_class[k].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * d.class_count());
    for (k, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::InsufficientData(format!(
                "class {k} has {} examples, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.shuffle(&mut rng);
    d.subset(&chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, shuffle_seed: u64, drop_last: bool) -> Self {
        Self {
            batch_size,
            shuffle_seed,
            drop_last,
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > m {
            return Err(Error::config(
                "train.batch_size",
                format!("must be in [1, {m}], got {}", self.batch_size),
            ));
        }
        Ok(())
    }

    /// Row indices of each batch for `epoch`. The shuffle depends only on
    /// `(shuffle_seed, epoch)`.
    pub fn indices(&self, m: usize, epoch: usize) -> Result<Vec<Vec<usize>>> {
        self.validate(m)?;
        let mut order: Vec<usize> = (0..m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        Ok(order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect())
    }
}

/// One mini-batch: inputs and, for labeled data, targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Option<Matrix>,
}

/// Lazily materialized mini-batches of one epoch.
pub struct Batches<'a> {
    data: &'a Dataset,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.plan.next()?;
        let sub = self.data.subset(&idx).expect("indices come from the plan");
        Some(Batch {
            inputs: sub.inputs,
            targets: sub.targets,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.plan.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batches<'a>(d: &'a Dataset, plan: &BatchPlan, epoch: usize) -> Result<Batches<'a>> {
    let plan = plan.indices(d.len(), epoch)?;
    Ok(Batches {
        data: d,
        plan: plan.into_iter(),
    })
}

/// Continuous regression data drawn from a known linear map.
#[derive(Debug, Clone)]
pub struct SyntheticLinear {
    pub inputs: Matrix,
    pub targets: Matrix,
    /// The `(n+1) × c` map, bias in the last row.
    pub true_map: Matrix,
}

/// `m` standard-normal inputs of width `n`, a standard-normal map `T`, and
/// targets `ẊT + N(0, noise_sd²)`.
pub fn synthetic_linear(m: usize, n: usize, c: usize, noise_sd: f64, seed: u64) -> Result<SyntheticLinear> {
    if m == 0 || n == 0 || c == 0 {
        return Err(Error::InvalidInput(format!("counts must be positive, got m={m} n={n} c={c}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidInput(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let true_map = Matrix::from_fn(n + 1, c, |_, _| StandardNormal.sample(&mut rng));
    let inputs = Matrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng));
    let mut targets = matmul(augment_ones(&inputs).xdot(), &true_map)?;
    if noise_sd > 0.0 {
        let noise = Normal::new(0.0, noise_sd).expect("valid sd");
        for v in targets.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(SyntheticLinear {
        inputs,
        targets,
        true_map,
    })
}

/// Labeled data for quick end-to-end runs: uniform inputs in `[0, 1]` labeled
/// by the argmax of a random linear map.
pub fn synthetic_classification(m: usize, n: usize, c: usize, seed: u64) -> Result<Dataset> {
    if m == 0 || n == 0 || c < 2 {
        return Err(Error::InvalidInput(format!("need m, n >= 1 and c >= 2, got m={m} n={n} c={c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = Matrix::from_fn(n + 1, c, |_, _| StandardNormal.sample(&mut rng));
    let inputs = Matrix::from_fn(m, n, |_, _| rng.random::<f64>());
    let scores = matmul(augment_ones(&inputs).xdot(), &map)?;
    Dataset::from_labels(inputs, &scores.argmax_rows(), c)
}
