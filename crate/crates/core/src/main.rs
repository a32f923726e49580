use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dat_core::harness::{self, OUTPUT_DIR_ENV};
use dat_core::probe::{self, Probe};
use dat_core::Error;

/// Distributed adversarial training on simulated workers.
#[derive(Debug, Parser)]
#[command(name = "dat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train per a JSON config; writes metrics CSV, eval CSV and a checkpoint.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the config's test set.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Run a property probe: quantizer, variance-scaling, lemma-a1 or large-batch-lalr.
    Probe {
        which: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the quantizer codec on a random vector.
    QuantizeBench {
        d: usize,
        b: u32,
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .filter(|d| !d.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train { config } => {
            let out = harness::run_experiment(&config)?;
            if let Some(r) = &out.final_eval {
                println!("rounds={} ta={} ra={}", out.run.rounds_completed(), r.ta, r.ra);
            }
            println!("outputs in {}", out.output_dir.display());
            Ok(true)
        }
        Command::Eval { checkpoint, config } => {
            let r = harness::eval_checkpoint(&checkpoint, &config)?;
            println!("{}", harness::eval_header(r.per_class.len()));
            println!("{}", harness::eval_row(0, 0, &r));
            Ok(true)
        }
        Command::Probe { which, seed } => {
            let which: Probe = which.parse()?;
            let (report, path) = probe::probe_suite(which, &output_dir(), seed)?;
            print!("{report}");
            println!("report written to {}", path.display());
            Ok(report.passed())
        }
        Command::QuantizeBench { d, b, trials, seed } => {
            print!("{}", probe::quantize_bench(d, b, trials, seed)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
