use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use mfed_cli::commands::{self, GlobalOpts};
use mfed_cli::{exit, CliError};

#[derive(Parser)]
#[command(name = "mfed", version, about = "Multi-task federated learning simulator")]
struct Cli {
    /// Config file (TOML); may also be given as the command's argument.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for client training.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.jsonl, summary.csv and checkpoints.
    Run { config_file: Option<PathBuf> },
    /// Compare finished runs; the first one is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
    },
    /// Run the convex convergence harness and check the rate.
    RateCheck { config_file: Option<PathBuf> },
    /// Write gnuplot data files from a finished run.
    PlotData { run: PathBuf },
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    let opts = GlobalOpts {
        seed: cli.seed,
        threads: cli.threads.map(|t| t as usize),
        out: cli.out,
    };
    match cli.command {
        Command::Run { config_file } => {
            let path = config_file
                .or(cli.config)
                .ok_or_else(|| CliError::config(anyhow!("run needs a config file (--config or argument)")))?;
            let (dir, summary) = commands::cmd_run(&path, &opts)?;
            print!("{}", commands::render_summary(&dir, &summary));
            Ok(0)
        }
        Command::Compare { runs } => {
            print!("{}", commands::compare_runs(&runs)?.render());
            Ok(0)
        }
        Command::RateCheck { config_file } => {
            let report = commands::cmd_rate_check(config_file.or(cli.config).as_deref(), &opts)?;
            print!("{}", report.render());
            Ok(if report.pass() { 0 } else { exit::RATE_CHECK })
        }
        Command::PlotData { run } => {
            for path in commands::cmd_plot_data(&run, opts.out.as_deref())? {
                println!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MFED_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
