//! Binary entry point. Parses arguments, dispatches to the library
//! commands, and maps failures onto the exit-code contract:
//! 0 success, 1 runtime failure, 2 usage or configuration error,
//! 3 verification failure. Errors go to stderr as one JSON object per
//! line so callers can parse them.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dqnfed_cli::commands::{cmd_compare, cmd_run, cmd_verify, CliError};
use dqnfed_cli::verify::SuiteReport;
use dqnfed_core::exec::configured_threads;
use dqnfed_core::orchestrator::Method;

#[derive(Parser)]
#[command(
    name = "dqnfed",
    version,
    about = "Deterministic federated-learning simulator with fair quasi-Newton aggregation",
    after_help = "Worker parallelism is capped by the DQNFED_THREADS environment variable \
(0 or unset = one worker per core). Exit codes: 0 success, 1 runtime failure, \
2 usage/config error, 3 verification failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one configuration and write round logs and summaries
    Run {
        /// Path to the TOML configuration
        #[arg(long)]
        config: PathBuf,
        /// Output directory for artifacts
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write the final per-client accuracy histogram CSV
        #[arg(long)]
        emit_histogram: bool,
    },
    /// Run the same problem under several methods and join the results
    Compare {
        /// Path to the TOML configuration
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated methods, e.g. dqnfed,fedavg
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// Output directory for artifacts
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the numerical verification suites
    Verify {
        /// Single suite to run (default: all)
        #[arg(long)]
        suite: Option<String>,
        /// Override the per-suite instance count
        #[arg(long)]
        iters: Option<usize>,
    },
}

fn print_reports(reports: &[SuiteReport]) {
    for r in reports {
        println!("{r}");
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            emit_histogram,
        } => {
            let artifacts = cmd_run(&config, &out, emit_histogram)?;
            let last = artifacts.outcome.logs.last().expect("at least one round");
            println!(
                "completed {} rounds; final global loss {:.6}; rho {:.3}; workers {}",
                artifacts.outcome.logs.len(),
                last.global_loss,
                last.rho,
                match configured_threads() {
                    0 => "auto".to_string(),
                    n => n.to_string(),
                }
            );
            println!("wrote {}", artifacts.rounds_csv.display());
            println!("wrote {}", artifacts.summary_json.display());
            if let Some(h) = &artifacts.histogram_csv {
                println!("wrote {}", h.display());
            }
            println!("wrote {}", artifacts.manifest_json.display());
            Ok(())
        }
        Command::Compare {
            config,
            methods,
            out,
        } => {
            let parsed: Vec<Method> = methods
                .iter()
                .map(|m| m.parse::<Method>())
                .collect::<Result<_, String>>()
                .map_err(CliError::Usage)?;
            let artifacts = cmd_compare(&config, &parsed, &out)?;
            for (method, outcome) in &artifacts.runs {
                let last = outcome.logs.last().expect("at least one round");
                println!(
                    "{method}: final global loss {:.6}; rho {:.3}",
                    last.global_loss, last.rho
                );
            }
            println!("wrote {}", artifacts.compare_csv.display());
            println!("wrote {}", artifacts.manifest_json.display());
            Ok(())
        }
        Command::Verify { suite, iters } => match cmd_verify(suite.as_deref(), iters) {
            Ok(reports) => {
                print_reports(&reports);
                println!("all suites passed");
                Ok(())
            }
            Err(CliError::VerificationFailed { failed, reports }) => {
                print_reports(&reports);
                Err(CliError::VerificationFailed {
                    failed,
                    reports: Vec::new(),
                })
            }
            Err(other) => Err(other),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": e.kind() })
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
