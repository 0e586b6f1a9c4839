//! The three entry points behind the binary: run one experiment,
//! compare methods on a shared problem, verify the numerics. Each is a
//! plain function over parsed arguments so tests and the acceptance
//! sweep drive them directly.

use std::fmt;
use std::path::{Path, PathBuf};

use dqnfed_core::orchestrator::{
    run_federation, FederationConfig, FederationOutcome, Method, OrchestratorError,
};

use crate::config::{parse_config, ConfigError};
use crate::outputs::{
    compare_csv, histogram_csv, now_unix_ms, rounds_csv, write_atomic, write_json, OutputError,
    RunManifest, RunSummary,
};
use crate::verify::{run_all_suites, run_suite, SuiteReport, SUITE_NAMES};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exits 2.
    Usage(String),
    /// The experiment itself failed; exits 1.
    Runtime(String),
    /// One or more verification suites failed; exits 3. Carries every
    /// suite's report so the caller can still print the full table.
    VerificationFailed {
        failed: Vec<String>,
        reports: Vec<SuiteReport>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::VerificationFailed { .. } => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Runtime(_) => "runtime",
            CliError::Usage(_) => "usage",
            CliError::VerificationFailed { .. } => "verification",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
            CliError::VerificationFailed { failed, .. } => {
                write!(f, "verification failed: {}", failed.join(", "))
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<OutputError> for CliError {
    fn from(e: OutputError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Paths written by one `run` invocation plus the outcome itself.
#[derive(Debug)]
pub struct RunArtifacts {
    pub outcome: FederationOutcome,
    pub rounds_csv: PathBuf,
    pub summary_json: PathBuf,
    pub manifest_json: PathBuf,
    pub histogram_csv: Option<PathBuf>,
}

fn manifest_paths(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn write_manifest(
    path: &Path,
    command: &str,
    config: &FederationConfig,
    artifacts: &[&Path],
    started: u128,
    finished: Option<u128>,
) -> Result<(), OutputError> {
    write_json(
        path,
        &RunManifest {
            code_version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            artifacts: manifest_paths(artifacts),
            started_unix_ms: started,
            finished_unix_ms: finished,
        },
    )
}

/// Executes one configuration and writes rounds.csv, summary.json, and
/// the manifest (plus histogram.csv on request) into `out_dir`.
pub fn cmd_run(
    config_path: &Path,
    out_dir: &Path,
    emit_histogram: bool,
) -> Result<RunArtifacts, CliError> {
    let cfg = parse_config(config_path)?;
    let rounds_path = out_dir.join("rounds.csv");
    let summary_path = out_dir.join("summary.json");
    let manifest_path = out_dir.join("manifest.json");
    let histogram_path = emit_histogram.then(|| out_dir.join("histogram.csv"));

    let mut artifact_list: Vec<&Path> = vec![&rounds_path, &summary_path];
    if let Some(h) = &histogram_path {
        artifact_list.push(h);
    }

    let started = now_unix_ms();
    write_manifest(&manifest_path, "run", &cfg, &artifact_list, started, None)?;

    let outcome = run_federation(&cfg)?;

    write_atomic(
        &rounds_path,
        &rounds_csv(cfg.method, cfg.master_seed, &outcome.logs),
    )?;
    let last = outcome.logs.last().expect("rounds >= 1 after validation");
    write_json(
        &summary_path,
        &RunSummary {
            config: &cfg,
            rounds_completed: outcome.logs.len(),
            final_global_loss: last.global_loss,
            final_fairness: &last.fairness,
        },
    )?;
    if let Some(h) = &histogram_path {
        write_atomic(h, &histogram_csv(&outcome.final_accuracies))?;
    }
    write_manifest(
        &manifest_path,
        "run",
        &cfg,
        &artifact_list,
        started,
        Some(now_unix_ms()),
    )?;

    Ok(RunArtifacts {
        outcome,
        rounds_csv: rounds_path,
        summary_json: summary_path,
        manifest_json: manifest_path,
        histogram_csv: histogram_path,
    })
}

/// Joined-table output of one `compare` invocation.
#[derive(Debug)]
pub struct CompareArtifacts {
    pub runs: Vec<(Method, FederationOutcome)>,
    pub compare_csv: PathBuf,
    pub manifest_json: PathBuf,
}

/// Runs the same configuration once per method. The master seed and
/// every derived stream are method-independent, so all runs share the
/// dataset, partition, initialization, and per-round client samples;
/// the joined table is a paired comparison.
pub fn cmd_compare(
    config_path: &Path,
    methods: &[Method],
    out_dir: &Path,
) -> Result<CompareArtifacts, CliError> {
    if methods.is_empty() {
        return Err(CliError::Usage(
            "compare needs at least one method (--methods m1,m2,...)".into(),
        ));
    }
    let mut seen: Vec<Method> = Vec::new();
    for m in methods {
        if seen.contains(m) {
            return Err(CliError::Usage(format!("method {m} listed twice")));
        }
        seen.push(*m);
    }
    let base = parse_config(config_path)?;
    let compare_path = out_dir.join("compare.csv");
    let manifest_path = out_dir.join("manifest.json");

    let started = now_unix_ms();
    write_manifest(
        &manifest_path,
        "compare",
        &base,
        &[&compare_path],
        started,
        None,
    )?;

    let mut runs: Vec<(Method, FederationOutcome)> = Vec::with_capacity(methods.len());
    for &method in methods {
        let cfg = FederationConfig { method, ..base.clone() };
        runs.push((method, run_federation(&cfg)?));
    }

    let logs: Vec<(Method, &[dqnfed_core::orchestrator::RoundLog])> = runs
        .iter()
        .map(|(m, o)| (*m, o.logs.as_slice()))
        .collect();
    write_atomic(&compare_path, &compare_csv(base.master_seed, &logs))?;
    write_manifest(
        &manifest_path,
        "compare",
        &base,
        &[&compare_path],
        started,
        Some(now_unix_ms()),
    )?;

    Ok(CompareArtifacts {
        runs,
        compare_csv: compare_path,
        manifest_json: manifest_path,
    })
}

/// Runs the requested suite (or all of them) and returns the reports;
/// the error lists the failing suites for exit-code mapping.
pub fn cmd_verify(
    suite: Option<&str>,
    iters: Option<usize>,
) -> Result<Vec<SuiteReport>, CliError> {
    let reports = match suite {
        None => run_all_suites(iters),
        Some(name) => vec![run_suite(name, iters).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown suite {name:?} (expected one of: {})",
                SUITE_NAMES.join(", ")
            ))
        })?],
    };
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.to_string())
        .collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::VerificationFailed { failed, reports })
    }
}
