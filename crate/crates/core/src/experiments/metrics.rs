//! Per-epoch metrics: CSV persistence and plot-series emission.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,train_acc,test_acc,train_loss,penalty,lr,wall_ms";

/// Series written by [`emit_plot_data`]; each becomes `<name>.dat`.
pub const PLOT_SERIES: [&str; 5] = ["train_acc", "test_acc", "train_loss", "penalty", "lr"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Percent in `[0, 100]`.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean per-step objective: data loss plus penalty.
    pub train_loss: f64,
    /// Mean per-step penalty component of `train_loss`.
    pub penalty_value: f64,
    pub lr: f64,
    /// Milliseconds spent in training steps (evaluation excluded); zero
    /// unless wall-clock recording is enabled.
    pub wall_time_ms: f64,
}

impl MetricsRecord {
    pub fn data_loss(&self) -> f64 {
        self.train_loss - self.penalty_value
    }

    fn series(&self, name: &str) -> f64 {
        match name {
            "train_acc" => self.train_accuracy,
            "test_acc" => self.test_accuracy,
            "train_loss" => self.train_loss,
            "penalty" => self.penalty_value,
            "lr" => self.lr,
            _ => unreachable!("unknown series {name}"),
        }
    }
}

/// Formats `v` with 6 significant digits, `%g` style: fixed notation for
/// decimal exponents in `[-5, 6)`, scientific otherwise, trailing zeros trimmed.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let fields = [
            r.epoch.to_string(),
            format_sig6(r.train_accuracy),
            format_sig6(r.test_accuracy),
            format_sig6(r.train_loss),
            format_sig6(r.penalty_value),
            format_sig6(r.lr),
            format_sig6(r.wall_time_ms),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no metrics records to write to {}",
            path.display()
        )));
    }
    fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

/// Parses a metrics CSV produced by [`write_metrics`].
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let bad = |msg: String| Error::InvalidInput(format!("metrics csv: {msg}"));
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("row {} has {} fields", i + 1, f.len())));
            }
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: `{s}` is not a number", i + 1)));
            Ok(MetricsRecord {
                epoch: f[0].parse().map_err(|_| bad(format!("row {}: bad epoch `{}`", i + 1, f[0])))?,
                train_accuracy: real(f[1])?,
                test_accuracy: real(f[2])?,
                train_loss: real(f[3])?,
                penalty_value: real(f[4])?,
                lr: real(f[5])?,
                wall_time_ms: real(f[6])?,
            })
        })
        .collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    parse_metrics(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Writes one `<series>.dat` file per series into `dir`: a `#` header line,
/// then `epoch value` rows separated by a space.
pub fn emit_plot_data(records: &[MetricsRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no metrics records to plot into {}",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in PLOT_SERIES {
        let mut body = format!("# epoch {name}\n");
        for r in records {
            body.push_str(&format!("{} {}\n", r.epoch, format_sig6(r.series(name))));
        }
        let path = dir.join(format!("{name}.dat"));
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
