use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pifilter::experiment::{
    convergence_study, render_summary, run_experiment_into, run_mc, simulate_record, write_mc_csv, write_record,
    write_report, write_study_csv, ExperimentConfig, ExperimentReport, RunOptions,
};
use pifilter::Error;

#[derive(Parser)]
#[command(name = "pifilter", version, about = "Path-integral nonlinear filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate state trajectories and measurement records.
    Simulate(Common),
    /// Run the path-integral filter only.
    Filter(Common),
    /// Run the filter together with every enabled oracle.
    Oracle(Common),
    /// Monte Carlo estimates of kernel matrix elements.
    Mc(Common),
    /// Error and observed order over a list of epsilons.
    Study {
        #[command(flatten)]
        common: Common,
        /// Comma-separated epsilons; overrides the config's study block.
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
    },
    /// Print a summary of a finished run directory.
    Report {
        /// Directory holding summary.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir, then ./results.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the data-parallel loops.
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    let mut config = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    Ok((config, out))
}

fn experiment(common: &Common, opts: RunOptions) -> Result<(), Failure> {
    let (config, out) = setup(common)?;
    let mut report = ExperimentReport::default();
    let result = run_experiment_into(&config, opts, &mut report);
    if let Err(e) = &result {
        report.failure = Some(e.to_string());
    }
    write_report(&report, &out, config.grid.points.len())?;
    print!("{}", render_summary(&report));
    result.map_err(Failure::from)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(common) => {
            let (config, out) = setup(&common)?;
            let hash = config.hash();
            for &seed in &config.seeds {
                let (traj, meas) = simulate_record(&config, seed)?;
                write_record(&traj, &meas, &hash, seed, &out)?;
            }
            println!("wrote {} record(s) to {}", config.seeds.len(), out.display());
            Ok(())
        }
        Command::Filter(common) => experiment(&common, RunOptions { filter_only: true }),
        Command::Oracle(common) => experiment(&common, RunOptions::default()),
        Command::Mc(common) => {
            let (config, out) = setup(&common)?;
            let rows = run_mc(&config)?;
            write_mc_csv(&rows, &config.hash(), config.seeds.first().copied(), &out)?;
            for r in &rows {
                println!(
                    "x={:?}: {:.6} ± {:.6} (grid {:.6})",
                    r.x, r.estimate, r.stderr, r.grid_reference
                );
            }
            Ok(())
        }
        Command::Study { common, epsilons } => {
            let (config, out) = setup(&common)?;
            let eps = if epsilons.is_empty() {
                config
                    .study
                    .as_ref()
                    .map(|s| s.epsilons.clone())
                    .ok_or_else(|| Failure::Config("no epsilons given and no study block in config".into()))?
            } else {
                epsilons
            };
            let rows = convergence_study(&config, &eps)?;
            write_study_csv(&rows, &config.hash(), config.seeds[0], &out)?;
            println!("{:>12} {:>14} {:>8}", "epsilon", "l2_error", "order");
            for r in &rows {
                let order = r.order.map(|o| format!("{o:.3}")).unwrap_or_default();
                println!("{:>12.6e} {:>14.6e} {:>8}", r.epsilon, r.error, order);
            }
            Ok(())
        }
        Command::Report { out } => {
            let report = read_summary(&out)?;
            print!("{}", render_summary(&report));
            if report.failure.is_some() {
                return Err(Failure::Numerical("run recorded a failure".into()));
            }
            Ok(())
        }
    }
}

fn read_summary(dir: &Path) -> Result<ExperimentReport, Failure> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
