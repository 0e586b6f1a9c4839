//! Library surface of the command-line front end: configuration
//! parsing, artifact writers, the run/compare/verify entry points, and
//! the oracle verification suites. The binary in `main.rs` is a thin
//! argument-parsing shell over this.

pub mod commands;
pub mod config;
pub mod outputs;
pub mod verify;

pub use commands::{cmd_compare, cmd_run, cmd_verify, CliError, CompareArtifacts, RunArtifacts};
pub use config::parse_config;
pub use verify::{run_all_suites, run_suite, SuiteReport, SUITE_NAMES};
