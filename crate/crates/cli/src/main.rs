//! `lunalab` — configure, run, resume and analyze memory-attention
//! experiments.
//!
//! Exit codes: 0 success, 2 config error, 3 input error, 4 numeric failure,
//! 5 usage error, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lunalab_core::error::Error;
use lunalab_core::experiment::{
    self, compare_suites, diagnose_run, load_config_with_overrides, render_significance_table,
    run_experiment, write_significance_report, CompareMetric,
};
use lunalab_core::tasks::export_dataset;

#[derive(Parser)]
#[command(name = "lunalab", version, about = "Desk-scale lab for memory-augmented efficient attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment suite (every seed, and every sweep memory size)
    Run {
        /// Experiment config file (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path config overrides, e.g. --set train.base_lr=0.02
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output root (defaults to config output_dir, then $LUNALAB_OUTPUT_DIR, then ./runs)
        #[arg(long)]
        output: Option<PathBuf>,
        /// Replace the config's seed list with this single seed
        #[arg(long)]
        seed: Option<u64>,
        /// Continue partial runs instead of refusing to touch them
        #[arg(long)]
        resume: bool,
    },
    /// Friedman test per suite directory, Holm correction across suites
    Compare {
        /// Suite directories; each holds treatment subdirectories with seed_* runs
        #[arg(required = true)]
        suites: Vec<PathBuf>,
        /// Score per run: final_accuracy or best_accuracy
        #[arg(long, default_value = "best_accuracy")]
        metric: String,
        /// Where to write the JSON report (default: <first suite>/report/significance.json)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Memory degradation and attention entropy tables for one run directory
    Diagnose {
        run_dir: PathBuf,
        /// Tolerance for numerical rank and row-uniqueness clustering
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Write a generated task split in the line-based dataset format
    ExportTask {
        #[arg(long)]
        config: PathBuf,
        /// Which split to export: train or val
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>, Error> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::usage(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Run { config, set, output, seed, resume } => {
            let mut cfg = load_config_with_overrides(&config, &parse_overrides(&set)?)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let artifacts = run_experiment(&cfg, output.as_deref(), resume)?;
            println!("suite: {}", artifacts.suite_dir.display());
            for r in &artifacts.runs {
                let mem = r.memory_size.map(|m| format!(" mem={m}")).unwrap_or_default();
                let acc = r
                    .final_val_accuracy
                    .map(|a| format!(" final_acc={a:.4}"))
                    .unwrap_or_default();
                let best = r
                    .best_val_accuracy
                    .map(|a| format!(" best_acc={a:.4}"))
                    .unwrap_or_default();
                println!(
                    "run seed={}{mem} steps={}{acc}{best} -> {}",
                    r.seed,
                    r.final_step,
                    r.path.display()
                );
            }
            Ok(())
        }
        Cmd::Compare { suites, metric, out } => {
            let metric: CompareMetric = metric.parse()?;
            let report = compare_suites(&suites, metric)?;
            print!("{}", render_significance_table(&report));
            let out_path = out.unwrap_or_else(|| suites[0].join("report").join("significance.json"));
            write_significance_report(&report, &out_path)?;
            println!("report: {}", out_path.display());
            Ok(())
        }
        Cmd::Diagnose { run_dir, tol } => {
            let artifacts = diagnose_run(&run_dir, tol)?;
            println!(
                "degradation: {} ({} rows)",
                artifacts.degradation_table.display(),
                artifacts.degradation_rows
            );
            println!(
                "entropy: {} ({} rows)",
                artifacts.entropy_table.display(),
                artifacts.entropy_rows
            );
            Ok(())
        }
        Cmd::ExportTask { config, split, out } => {
            let cfg = experiment::load_config(&config)?;
            let (train_set, val_set) = cfg.task.materialize()?;
            let ds = match split.as_str() {
                "train" => train_set,
                "val" => val_set,
                other => return Err(Error::usage(format!("unknown split {other:?}"))),
            };
            export_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.samples.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Input(_) => 3,
                Error::Numeric(_) => 4,
                Error::Usage(_) => 5,
                Error::Io(_) => 1,
            })
        }
    }
}
