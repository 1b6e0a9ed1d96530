use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fedsim::harness::{self, Overrides};
use fedsim::Error;

/// Federated-learning simulator.
#[derive(Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured method on one center layout.
    Run(Common),
    /// FedDropoutAvg over the configured client/parameter dropout grid.
    Grid(Common),
    /// Rotate the held-out centers over k folds and pool the results.
    Kfold(Common),
    /// Write the configured dataset as CSV.
    ExportData {
        #[command(flatten)]
        common: Common,
        /// Destination CSV file.
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Run(c) | Command::Grid(c) | Command::Kfold(c) => c,
        Command::ExportData { common, .. } => common,
    };
    let overrides = Overrides {
        seed: common.seed,
        output_dir: common.out.clone(),
    };
    let cfg = match harness::load_config(&common.config, &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Run(_) => harness::cmd_run(&cfg).map(|c| print!("{}", c.summary)),
        Command::Grid(_) => harness::cmd_grid(&cfg).map(|rows| {
            for r in rows.iter().filter(|r| r.selected) {
                println!(
                    "selected cdr={} fdr={} total_val_loss={}",
                    r.cdr, r.fdr, r.total_val_loss
                );
            }
        }),
        Command::Kfold(_) => harness::cmd_kfold(&cfg).map(|k| print!("{}", k.pooled)),
        Command::ExportData { csv, .. } => {
            harness::load_datasets(&cfg).and_then(|d| fedsim::data::write_csv_federation(&d, csv))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            error!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
