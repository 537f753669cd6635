use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedalign_cli::commands::{compare_table, RESCALE_TOLERANCE};
use fedalign_cli::{
    cmd_boundcheck, cmd_compare, cmd_gradcheck, cmd_partition, cmd_train, RunConfig,
};
use fedalign_core::gradcheck::GradcheckOptions;

/// Federated training with backpropagation or feedback alignment.
///
/// Outputs:
///   rounds.jsonl      one JSON object per round
///   metrics.csv       round, lr, fa_layers, drift, train/eval loss and
///                     accuracy, grad_gap_start, grad_gap_max,
///                     feedback_warnings, alignment (";"-separated per layer)
///   compare.csv       seed, round, drift and eval accuracy per method,
///                     drift_reduction = drift_bp - drift_flfa
///   bound_report.csv  run, mode, round, layer, steps, lhs, rhs, slack and
///                     the bound terms; one row per recorded step prefix
///   model.json, manifest.json, summary.json, bound_summary.json
///
/// FEDALIGN_SEED and FEDALIGN_OUTPUT_DIR override the config file; flags
/// override both.
#[derive(Parser)]
#[command(name = "fedalign", version, verbatim_doc_comment)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Client worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = std::fs::read_to_string(&self.config)
            .with_context(|| format!("cannot read config {}", self.config.display()))?;
        let mut cfg =
            RunConfig::from_toml(&text).with_context(|| format!("in {}", self.config.display()))?;
        cfg.apply_env()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        if let Some(r) = self.rounds {
            cfg.train.rounds = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one federated run.
    Train(RunArgs),
    /// Paired BP vs FLFA runs over the configured seeds.
    Compare(RunArgs),
    /// Finite-difference and feedback-collapse checks of the backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Trace-mode runs checked against the drift bound.
    Boundcheck(RunArgs),
    /// Print the client shard assignment as JSON.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write to a file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn verdict(pass: bool) -> ExitCode {
    if pass {
        println!("PASS");
        ExitCode::SUCCESS
    } else {
        println!("FAIL");
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let s = cmd_train(&cfg)?;
            println!(
                "{} rounds: train loss {:.6} -> {:.6}, eval accuracy {:.4}",
                s.rounds, s.initial_train_loss, s.final_train_loss, s.final_eval_accuracy
            );
            if !s.empty_clients.is_empty() {
                eprintln!("warning: clients {:?} received no samples", s.empty_clients);
            }
            if s.bound_violations > 0 {
                eprintln!("{} bound rows with lhs > rhs", s.bound_violations);
            }
            println!("outputs in {}", cfg.output_dir.display());
            Ok(verdict(s.pass))
        }
        Command::Compare(args) => {
            let cfg = args.load()?;
            let s = cmd_compare(&cfg)?;
            print!("{}", compare_table(&s));
            println!("outputs in {}", cfg.output_dir.display());
            Ok(verdict(s.pass))
        }
        Command::Gradcheck {
            cases,
            seed,
            corrupt_backward,
            output,
        } => {
            let opts = GradcheckOptions {
                cases,
                seed,
                corrupt_backward,
            };
            let r = cmd_gradcheck(&opts, output.as_deref())?;
            println!(
                "{} cases, {} parameters ({} kinks skipped)\nmax relative error {:.3e} (threshold {:.0e})\nfeedback collapse residual {:.3e} (threshold {:.0e})\nempty feedback identical to bp: {}",
                r.cases,
                r.parameters_checked,
                r.kinks_skipped,
                r.max_relative_error,
                r.relative_error_threshold,
                r.fa_collapse_residual,
                r.collapse_threshold,
                r.empty_feedback_identical
            );
            Ok(verdict(r.pass))
        }
        Command::Boundcheck(args) => {
            let cfg = args.load()?;
            let s = cmd_boundcheck(&cfg)?;
            for r in &s.runs {
                println!(
                    "{:<16} rows {:>5}  violations {:>3}  min slack {:.3e}  fa weight term {}  rescale residual {:.1e}/{:.1e} over {} checks (tol {:.0e})",
                    r.run,
                    r.rows,
                    r.violations,
                    r.min_slack,
                    r.fa_weight_divergence_max.map_or("-".to_string(), |w| w.to_string()),
                    r.max_norm_residual,
                    r.max_direction_residual,
                    r.rescale_checks,
                    RESCALE_TOLERANCE
                );
            }
            println!("outputs in {}", cfg.output_dir.display());
            Ok(verdict(s.pass))
        }
        Command::Partition {
            config,
            seed,
            output,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let json = cmd_partition(&cfg)?;
            match output {
                Some(p) => std::fs::write(&p, json + "\n")
                    .with_context(|| format!("cannot write {}", p.display()))?,
                None => println!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
