use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use transport_energy::cli::{run_from_path, Mode};

#[derive(Parser)]
#[command(name = "transport-energy", version, about = "Gradient-flow solver for the regularized transport energy")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// One of flow, jko, sweep, oracle-check.
        #[arg(long)]
        mode_override: Option<Mode>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match args.command {
        Command::Run { config, output_dir, seed, mode_override } => {
            match run_from_path(&config, output_dir, seed, mode_override) {
                Ok(report) => {
                    for m in &report.messages {
                        println!("{m}");
                    }
                    for f in &report.files {
                        println!("wrote {}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err((code, e)) => {
                    eprintln!("error: {e}");
                    ExitCode::from(code as u8)
                }
            }
        }
    }
}
