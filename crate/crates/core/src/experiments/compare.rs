//! The four-arm regularizer comparison: L2, Dropout+L2, DL-Reg and
//! Dropout+DL-Reg, all trained from the same base configuration and data.

use std::fmt::Write as _;
use std::thread;

use super::config::{Dropout, Regularizer, TrainConfig};
use super::metrics::{format_sig6, MetricsRecord};
use super::train::{run_on_data, ExperimentData};
use crate::error::Result;
use crate::regularizers::ZPolicy;

pub const ARM_NAMES: [&str; 4] = ["l2", "dropout+l2", "dlreg", "dropout+dlreg"];

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: &'static str,
    pub config: TrainConfig,
}

/// Derives the arm configurations. Each arm keeps every base setting except
/// the regularizer and dropout; gammas come from the `compare.*` keys and
/// dropout rates from the base (or the defaults when the base has none).
pub fn comparison_arms(base: &TrainConfig) -> Vec<Arm> {
    let dropout = base.dropout.unwrap_or(Dropout { input: 0.2, hidden: 0.5 });
    let policy = match base.regularizer {
        Regularizer::DlReg { policy, .. } => policy,
        _ => ZPolicy::default(),
    };
    let l2 = Regularizer::L2 {
        gamma: base.compare.l2_gamma,
    };
    let dlreg = Regularizer::DlReg {
        gamma: base.compare.dlreg_gamma,
        policy,
    };
    let arm = |name, regularizer, dropout| {
        let mut config = base.clone();
        config.regularizer = regularizer;
        config.dropout = dropout;
        // Unlabeled data only feeds DL-Reg; the L2 arms train on the labeled part.
        if !matches!(regularizer, Regularizer::DlReg { .. }) {
            config.data.unlabeled_fraction = 0.0;
        }
        Arm { name, config }
    };
    vec![
        arm(ARM_NAMES[0], l2, None),
        arm(ARM_NAMES[1], l2, Some(dropout)),
        arm(ARM_NAMES[2], dlreg, None),
        arm(ARM_NAMES[3], dlreg, Some(dropout)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub name: &'static str,
    pub config: TrainConfig,
    pub records: Vec<MetricsRecord>,
}

impl ArmResult {
    pub fn final_test_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_accuracy)
    }

    pub fn best_test_accuracy(&self) -> f64 {
        self.records.iter().map(|r| r.test_accuracy).fold(f64::NAN, f64::max)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.train_loss)
    }
}

/// Trains every arm on `data`. Arms run on separate threads when
/// `compare.parallel` is set; results are identical either way.
pub fn run_comparison(base: &TrainConfig, data: &ExperimentData) -> Result<Vec<ArmResult>> {
    let arms = comparison_arms(base);
    // L2 arms ignore the unlabeled pool, so every arm shares one labeled split.
    let labeled_only = ExperimentData {
        train: data.train.clone(),
        test: data.test.clone(),
        unlabeled: None,
    };
    let data_for = |arm: &Arm| {
        if arm.config.data.unlabeled_fraction > 0.0 {
            data
        } else {
            &labeled_only
        }
    };
    let outcomes: Vec<Result<Vec<MetricsRecord>>> = if base.compare.parallel {
        thread::scope(|s| {
            let handles: Vec<_> = arms
                .iter()
                .map(|arm| s.spawn(|| run_on_data(&arm.config, data_for(arm))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        arms.iter().map(|arm| run_on_data(&arm.config, data_for(arm))).collect()
    };
    arms.into_iter()
        .zip(outcomes)
        .map(|(arm, records)| {
            Ok(ArmResult {
                name: arm.name,
                config: arm.config,
                records: records?,
            })
        })
        .collect()
}

/// Fixed-width text table, one row per arm.
pub fn summary_table(results: &[ArmResult]) -> String {
    let mut s = format!(
        "{:<16} {:>10} {:>10} {:>12} {:>8}\n",
        "arm", "final_acc", "best_acc", "train_loss", "epochs"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<16} {:>10.2} {:>10.2} {:>12.6} {:>8}",
            r.name,
            r.final_test_accuracy(),
            r.best_test_accuracy(),
            r.final_train_loss(),
            r.records.len()
        );
    }
    s
}

pub fn summary_csv(results: &[ArmResult]) -> String {
    let mut s = String::from("arm,final_test_acc,best_test_acc,final_train_loss,epochs\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.name,
            format_sig6(r.final_test_accuracy()),
            format_sig6(r.best_test_accuracy()),
            format_sig6(r.final_train_loss()),
            r.records.len()
        );
    }
    s
}
