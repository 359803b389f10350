//! `sadg` - generate the synthetic corpus, run experiment grids, render reports.

use clap::{Parser, Subcommand};
use sadg_core::experiment::{self, ExperimentPlan};
use sadg_core::synth::{self, default_domains, generate_corpus, save_corpus};
use sadg_core::trainer::TrainError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "sadg", version, about = "Scale-aligned domain generalization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the default four-domain synthetic corpus
    Gen {
        /// Output directory
        #[arg(long, alias = "corpus")]
        out: PathBuf,
        #[arg(long, default_value_t = synth::DEFAULT_SEED)]
        seed: u64,
        /// Images per class per domain
        #[arg(long, default_value_t = synth::DEFAULT_COUNT_PER_CLASS)]
        count: usize,
        /// Canvas side in pixels
        #[arg(long, default_value_t = synth::DEFAULT_CANVAS)]
        canvas: usize,
    },
    /// Train and evaluate every run of an experiment plan
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key=value plan file; flags below override it
        #[arg(long)]
        plan: Option<PathBuf>,
        /// lodo | ablation | stages | limited
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        target: Option<String>,
        /// Comma-separated seeds
        #[arg(long)]
        seeds: Option<String>,
        /// Override one setting (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Print the comparison table of a results directory and write ROC CSVs
    Report {
        /// Results directory (as given to `run --out`)
        #[arg(long, alias = "results")]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn build_plan(
    plan: Option<PathBuf>,
    mode: Option<String>,
    target: Option<String>,
    seeds: Option<String>,
    sets: &[String],
) -> Result<ExperimentPlan, Failure> {
    let mut p = match plan {
        Some(path) => ExperimentPlan::from_file(&path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentPlan::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in [("mode", mode), ("target", target), ("seeds", seeds)] {
        if let Some(v) = v {
            overrides.push((k.into(), v));
        }
    }
    for (k, v) in overrides {
        p.set(&k, &v).map_err(Failure::Usage)?;
    }
    Ok(p)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen {
            out,
            seed,
            count,
            canvas,
        } => {
            if count == 0 || canvas == 0 {
                return Err(Failure::Usage("count and canvas must be positive".into()));
            }
            let corpus = generate_corpus(&default_domains(), count, canvas, seed);
            save_corpus(&out, &corpus).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("wrote {} images to {}", corpus.len(), out.display());
            for d in &corpus.domains {
                println!(
                    "  {}: {} single, {} recapture",
                    d.id,
                    d.count_class(synth::SINGLE_CAPTURE),
                    d.count_class(synth::RECAPTURE)
                );
            }
            Ok(())
        }
        Command::Run {
            corpus,
            out,
            plan,
            mode,
            target,
            seeds,
            sets,
        } => {
            let plan = build_plan(plan, mode, target, seeds, &sets)?;
            let table = experiment::run_plan(&plan, &corpus, &out).map_err(|e| match e {
                experiment::ExperimentError::Plan(_)
                | experiment::ExperimentError::Train(TrainError::Config(_)) => {
                    Failure::Usage(e.to_string())
                }
                other => Failure::Runtime(other.to_string()),
            })?;
            print!("{}", table.render());
            println!("results: {}", out.join(experiment::RESULTS_FILE).display());
            Ok(())
        }
        Command::Report { out } => {
            let text = experiment::report(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.kind() == clap::error::ErrorKind::DisplayHelp || e.kind() == clap::error::ErrorKind::DisplayVersion => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
