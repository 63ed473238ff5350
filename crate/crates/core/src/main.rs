use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use squid::pipeline::{self, EvalSplit, Overrides, RunConfig, SweepParam};
use squid::Error;

/// Multilingual naturalness prediction: synthetic benchmarks, training,
/// evaluation and cross-locale experiments.
#[derive(Parser)]
#[command(name = "squid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (overrides the file)
    #[arg(long)]
    seed: Option<u64>,
    /// Training preset: desk-tiny, voicemos or squid-default
    #[arg(long)]
    preset: Option<String>,
    /// Output directory [default: $SQUID_OUT/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for replicas and grid cells
    #[arg(long)]
    workers: Option<usize>,
    /// Root for default output directories
    #[arg(long, env = "SQUID_OUT", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilingual rating dataset
    Synth(Common),
    /// Train replicas and evaluate their best snapshots on the test split
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to initialise from (sequential fine-tuning)
        #[arg(long)]
        warm_start: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of the configured manifest
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// test, dev, train, all, fine_tuned or zero_shot
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Locale-by-locale transfer matrix of mono-locale models
    Transfer(Common),
    /// Temperature or locale-subset sweep
    Sweep {
        #[command(flatten)]
        common: Common,
        /// temperature or subset
        #[arg(long)]
        param: String,
    },
    /// Replicate-average the reports of several run directories
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Common {
    fn resolve(&self, warm_start: Option<PathBuf>) -> squid::Result<RunConfig> {
        let ov = Overrides {
            seed: self.seed,
            workers: self.workers,
            preset: self.preset.clone(),
            warm_start,
        };
        RunConfig::resolve(self.config.as_deref(), &ov)
    }

    fn out(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.out_root.join(command))
    }
}

fn run(cli: Cli) -> squid::Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let out = c.out("synth");
            let data = pipeline::run_synth(&c.resolve(None)?, &out)?;
            println!("{} utterances written to {}", data.manifest.len(), out.display());
        }
        Command::Train { common, warm_start } => {
            let out = common.out("train");
            let summary = pipeline::run_train(&common.resolve(warm_start)?, &out)?;
            for r in &summary.replicas {
                println!("{}: best step {}", r.dir.display(), r.best_step);
            }
            print_means(&summary.report, &out);
        }
        Command::Eval { common, checkpoint, split } => {
            let which: EvalSplit = split.parse()?;
            let out = common.out("eval");
            let report = pipeline::run_eval(&common.resolve(None)?, &checkpoint, which, &out)?;
            print_means(&report, &out);
        }
        Command::Transfer(c) => {
            let out = c.out("transfer");
            let m = pipeline::run_transfer(&c.resolve(None)?, &out)?;
            match m.mean_off_diagonal() {
                Some(v) => println!("mean off-diagonal tau {v:.4}"),
                None => println!("mean off-diagonal tau undefined"),
            }
            println!("matrix written to {}", out.join("transfer.csv").display());
        }
        Command::Sweep { common, param } => {
            let param: SweepParam = param.parse()?;
            let out = common.out("sweep");
            pipeline::run_sweep(&common.resolve(None)?, param, &out)?;
            println!("sweep written to {}", out.display());
        }
        Command::Report { common, runs } => {
            let out = common.out("report");
            let report = pipeline::run_report(&common.resolve(None)?, &runs, &out)?;
            print_means(&report, &out);
        }
    }
    Ok(())
}

fn print_means(report: &squid::eval::EvalReport, out: &Path) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mean tau: fine_tuned {}, zero_shot {}, all {} ({} locales, {} skipped)",
        fmt(report.mean_fine_tuned()),
        fmt(report.mean_zero_shot()),
        fmt(report.mean_all()),
        report.rows.len(),
        report.skipped.len()
    );
    println!("report written to {}", out.join("report.csv").display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_user(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn is_user(e: &Error) -> bool {
    // a missing input file is the user's mistake too
    e.is_user_error() || matches!(e, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
}
