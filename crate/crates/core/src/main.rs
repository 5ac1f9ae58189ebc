use std::path::PathBuf;
use std::process::ExitCode;

use bbgky_bose::cli::{self, CliError, ScenarioConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bbgky-bose", version, about = "Truncated BBGKY dynamics of a Bose-Hubbard dimer")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario in a config file.
    Run {
        config: PathBuf,
        /// Output directory, overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long, env = "BBGKY_BOSE_THREADS")]
        threads: Option<usize>,
    },
    /// Parse and check a config file without running it.
    Validate { config: PathBuf },
}

fn run(args: Args) -> Result<bool, CliError> {
    match args.command {
        Command::Validate { config } => {
            let cfg = ScenarioConfig::load(&config)?;
            for spec in cfg.runs() {
                println!("{}", spec.name());
            }
            Ok(true)
        }
        Command::Run { config, out, threads } => {
            if threads == Some(0) {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
            let cfg = ScenarioConfig::load(&config)?;
            let dir = cli::run::output_dir(&cfg, out.as_deref());
            let manifest = cli::execute(&cfg, &dir, threads)?;
            for r in &manifest.runs {
                match &r.detail {
                    Some(d) => println!("{:<12} {} ({d})", r.name, r.termination),
                    None => println!("{:<12} {}", r.name, r.termination),
                }
            }
            Ok(manifest.all_diagnosed())
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("bbgky-bose: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
