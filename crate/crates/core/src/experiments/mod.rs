//! The experiment harness driven by the `dlreg` binary.

pub mod checks;
pub mod compare;
pub mod config;
pub mod metrics;
pub mod train;

pub use config::{parse_config, Dropout, Regularizer, TrainConfig};
pub use metrics::{emit_plot_data, write_metrics, MetricsRecord};
pub use train::{evaluate, load_data, run_experiment, run_on_data, ExperimentData, StepMetrics, Trainer};
