use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dosefind_cli::posterior::cmd_posterior;
use dosefind_cli::study::{cmd_study, Overrides};
use dosefind_cli::CliError;
use dosefind_service::Settings;

#[derive(Parser)]
#[command(name = "dosefind", version, about = "Bayesian Phase I dose finding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation study and write its report.
    Study {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Replications for every policy and scenario.
        #[arg(long)]
        reps: Option<usize>,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the MTD posterior for a recorded history.
    Posterior {
        history: PathBuf,
        /// Directory for summary.json and density.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the trial-conduct HTTP service.
    Serve {
        /// Overrides DOSEFIND_BIND.
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
        /// Overrides DOSEFIND_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Study {
            config,
            seed,
            reps,
            workers,
            out,
        } => {
            let overrides = Overrides { seed, reps, workers, out };
            let (dir, output) = cmd_study(&config, &overrides)?;
            let _ = write!(std::io::stdout().lock(), "{}", output.table());
            eprintln!("report written to {}", dir.display());
        }
        Command::Posterior { history, out } => {
            let summary = cmd_posterior(&history, out.as_deref())?;
            let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout().lock(), "{json}");
        }
        Command::Serve { bind, data_dir } => {
            let mut settings = Settings::from_env()?;
            if let Some(b) = bind {
                settings.bind = b;
            }
            if let Some(d) = data_dir {
                settings.data_dir = d;
            }
            let rt = tokio::runtime::Runtime::new()
                .map_err(|e| dosefind_service::ServiceError::Storage(format!("runtime: {e}")))?;
            rt.block_on(dosefind_service::serve(settings, dosefind_service::shutdown_signal()))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
