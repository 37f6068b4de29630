//! `dlreg`: train one configuration, compare the four regularizer arms, or
//! run the self-check suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlreg_core::experiments::checks::run_self_checks;
use dlreg_core::experiments::compare::{run_comparison, summary_csv, summary_table};
use dlreg_core::experiments::metrics::{emit_plot_data, write_metrics};
use dlreg_core::experiments::train::{load_data, run_with};
use dlreg_core::experiments::{parse_config, MetricsRecord, TrainConfig};
use dlreg_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dlreg", version, about = "Linearity-regularized MLP training on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration and write its metrics.
    Train(RunArgs),
    /// Train the L2, Dropout+L2, DL-Reg and Dropout+DL-Reg arms and summarize.
    Compare(RunArgs),
    /// Run the gradient and invariant self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Key = value configuration file; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<TrainConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut config = parse_config(&text)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }

    fn out_dir(&self, verb: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(verb))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn log_epoch(prefix: &str, r: &MetricsRecord) {
    eprintln!(
        "{prefix}epoch {:>4}  train {:6.2}%  test {:6.2}%  loss {:.6}  penalty {:.3e}  lr {:.5}",
        r.epoch, r.train_accuracy, r.test_accuracy, r.train_loss, r.penalty_value, r.lr
    );
}

fn train(args: &RunArgs) -> Result<()> {
    let config = args.load()?;
    let out = args.out_dir("train");
    create_dir(&out)?;
    write_file(&out.join("config.txt"), &config.to_text())?;
    let data = load_data(&config)?;
    let mut records = Vec::with_capacity(config.epochs);
    let outcome = run_with(&config, &data, |r| {
        log_epoch("", r);
        records.push(r.clone());
        Ok(())
    });
    // Completed epochs are kept even when training aborts.
    if !records.is_empty() {
        write_metrics(&records, out.join("metrics.csv"))?;
        emit_plot_data(&records, out.join("plots"))?;
    }
    outcome?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn compare(args: &RunArgs) -> Result<()> {
    let config = args.load()?;
    let out = args.out_dir("compare");
    create_dir(&out)?;
    write_file(&out.join("config.txt"), &config.to_text())?;
    let data = load_data(&config)?;
    let results = run_comparison(&config, &data)?;
    for r in &results {
        let dir = out.join(r.name.replace('+', "_"));
        create_dir(&dir)?;
        write_file(&dir.join("config.txt"), &r.config.to_text())?;
        write_metrics(&r.records, dir.join("metrics.csv"))?;
        emit_plot_data(&r.records, dir.join("plots"))?;
    }
    write_file(&out.join("summary.csv"), &summary_csv(&results))?;
    print!("{}", summary_table(&results));
    Ok(())
}

fn check(seed: u64) -> Result<bool> {
    let outcomes = run_self_checks(seed);
    for c in &outcomes {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(outcomes.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::Compare(args) => compare(args),
        Command::Check { seed } => match check(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Numerical("self-checks failed".into())),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
