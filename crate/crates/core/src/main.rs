use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedrel::federation::Mode;
use fedrel::harness::{
    compare, comparison_csv, ComparisonRow, evaluate_checkpoint, gradcheck_suite, load_or_generate, parse_config, run_experiment,
    ExperimentConfig,
};
use fedrel::synthdata::save_dataset;
use fedrel::{Error, Result};

/// Largest finite-difference relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "fedrel", version, about = "Federated relevance training of dynamic inter-intra graph models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed; required without --config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
}

impl Common {
    fn resolve(&self, participants: Option<usize>) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(path), _) => parse_config(path)?,
            (None, Some(seed)) => ExperimentConfig::new(seed),
            (None, None) => {
                return Err(Error::Config {
                    key: "seed".into(),
                    message: "pass --seed or a --config that sets it".into(),
                })
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = mode.parse::<Mode>()?;
        }
        if let Some(w) = self.window {
            cfg.model.window = w;
        }
        if let Some(r) = self.rounds {
            cfg.federation.rounds = r;
        }
        if let Some(k) = participants {
            cfg.federation.participants = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as a container file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one federated (or centralised) training and stream metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        participants: Option<usize>,
        /// Metrics file (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to save the final global model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check every gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a saved checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        participants: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every mode for each participant count and tabulate the best scores.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [2, 3, 5])]
        participants: Vec<usize>,
        /// CSV output; the table is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })
}

/// One side-by-side table per participant count.
fn summaries(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let mut last = None;
    for r in rows {
        if last != Some(r.participants) {
            if last.is_some() {
                out.push('\n');
            }
            out.push_str(&format!(
                "participants {}\n  {:<8} {:>13} {:>9} {:>11}\n",
                r.participants, "mode", "best macro-f1", "best acc", "final loss"
            ));
            last = Some(r.participants);
        }
        out.push_str(&format!(
            "  {:<8} {:>13.4} {:>9.4} {:>11.4}\n",
            r.mode, r.best_macro_f1, r.best_acc, r.final_loss
        ));
    }
    out
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.resolve(None)?;
            let ds = load_or_generate(&cfg)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} sequences to {}", ds.len(), out.display());
        }
        Command::Train {
            common,
            participants,
            out,
            checkpoint,
        } => {
            let mut cfg = common.resolve(participants)?;
            if out.is_some() {
                cfg.output.metrics = out;
            }
            if checkpoint.is_some() {
                cfg.output.checkpoint = checkpoint;
            }
            let result = run_experiment(&cfg, |m| {
                println!(
                    "round {:>4}  loss {:.4}  acc {:.4}  macro-f1 {:.4}",
                    m.round, m.global_loss, m.global_acc, m.global_macro_f1
                );
            })?;
            println!("best macro-f1 {:.4}", result.best_macro_f1());
        }
        Command::Gradcheck { seed } => {
            let mut worst: f64 = 0.0;
            for (name, report) in gradcheck_suite(seed)? {
                println!(
                    "{name:<28} entries {:>4}  max relative error {:.3e}",
                    report.entries_checked, report.max_relative_error
                );
                worst = worst.max(report.max_relative_error);
            }
            println!("max relative error {worst:.3e}");
            if worst >= GRADCHECK_TOLERANCE {
                eprintln!("error: max relative error exceeds {GRADCHECK_TOLERANCE:e}");
                return Ok(false);
            }
        }
        Command::Eval {
            common,
            participants,
            checkpoint,
        } => {
            let cfg = common.resolve(participants)?;
            let e = evaluate_checkpoint(&cfg, &checkpoint)?;
            println!("accuracy {:.4}  macro-f1 {:.4}  loss {:.4}", e.accuracy, e.macro_f1, e.loss);
        }
        Command::Compare {
            common,
            participants,
            out,
        } => {
            let cfg = common.resolve(None)?;
            let rows = compare(&cfg, &participants, |r| {
                eprintln!("K={} {:<8} best macro-f1 {:.4}", r.participants, r.mode, r.best_macro_f1);
            })?;
            print!("{}", summaries(&rows));
            if let Some(path) = out {
                write(&path, &comparison_csv(&rows))?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
