use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lqrvol::cli;

#[derive(Parser)]
#[command(name = "lqrvol", version, about = "Volatility/efficiency experiments for discounted LQR markets")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and write its CSVs and manifest.
    Run {
        scenario: PathBuf,
        /// Overrides `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// `dotted.key=value`, repeatable; values are parsed as TOML.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Caps the worker threads.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List the experiments, their required keys and output columns.
    List,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::List => {
            print!("{}", cli::list_experiments().to_csv());
            ExitCode::SUCCESS
        }
        Command::Run {
            scenario,
            seed,
            out_dir,
            overrides,
            threads,
        } => {
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            match cli::run(&scenario, &overrides, seed, &out_dir) {
                Ok(report) => {
                    for p in &report.outputs {
                        println!("wrote {}", p.display());
                    }
                    println!("wrote {}", report.manifest.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
