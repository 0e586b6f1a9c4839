//! Artifact writers: round CSVs, joined comparison tables, JSON
//! summaries, and the run manifest.
//!
//! Every file is written atomically (temp file in the destination
//! directory, then rename), so a crash never leaves a half-written
//! artifact. Floats are rendered with Rust's shortest-roundtrip
//! formatting, which is deterministic; identical configurations
//! therefore produce byte-identical files, with manifest timestamps and
//! the wallclock column as the only run-dependent fields.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dqnfed_core::metrics::FairnessReport;
use dqnfed_core::orchestrator::{FederationConfig, Method, RoundLog};
use serde::Serialize;

/// Column layout of every per-round CSV.
pub const ROUNDS_HEADER: &str = "round,method,seed,mean_acc,std_acc,worst10,best10,angle_deg,\
kl_nats,rho,global_loss,eta,eta_applied,num_dropped,wallclock_ms";

#[derive(Debug)]
pub enum OutputError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Serialize(serde_json::Error),
}

impl std::fmt::Display for OutputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutputError::Io { path, source } => {
                write!(f, "cannot write {}: {source}", path.display())
            }
            OutputError::Serialize(e) => write!(f, "cannot serialize artifact: {e}"),
        }
    }
}

impl std::error::Error for OutputError {}

impl From<serde_json::Error> for OutputError {
    fn from(e: serde_json::Error) -> Self {
        OutputError::Serialize(e)
    }
}

/// Writes `contents` to `path` through a temp file in the same
/// directory followed by a rename, the usual atomic-replace idiom.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), OutputError> {
    let io_err = |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(io_err)?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, contents).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

fn push_fairness(row: &mut String, f: &FairnessReport) {
    let _ = write!(
        row,
        "{},{},{},{},{},{}",
        f.mean_acc, f.std_acc, f.worst_k, f.best_k, f.angle_deg, f.kl_nats
    );
}

/// Renders one run's logs under the pinned header.
pub fn rounds_csv(method: Method, seed: u64, logs: &[RoundLog]) -> String {
    let mut out = String::with_capacity(64 * (logs.len() + 1));
    out.push_str(ROUNDS_HEADER);
    out.push('\n');
    for l in logs {
        let _ = write!(out, "{},{},{seed},", l.round, method.name());
        push_fairness(&mut out, &l.fairness);
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{}",
            l.rho,
            l.global_loss,
            l.eta,
            l.eta_applied,
            l.dropped_clients.len(),
            l.wallclock_ms
        );
    }
    out
}

/// Renders the joined comparison table: one row per round, the shared
/// seed, then each method's metric columns side by side as paired
/// observations.
pub fn compare_csv(seed: u64, runs: &[(Method, &[RoundLog])]) -> String {
    let rounds = runs.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    let mut out = String::new();
    out.push_str("round,seed");
    for (m, _) in runs {
        for col in [
            "mean_acc",
            "std_acc",
            "worst10",
            "best10",
            "angle_deg",
            "kl_nats",
            "rho",
            "global_loss",
            "eta",
            "eta_applied",
            "num_dropped",
        ] {
            let _ = write!(out, ",{}_{col}", m.name());
        }
    }
    out.push('\n');
    for t in 0..rounds {
        let _ = write!(out, "{t},{seed}");
        for (_, logs) in runs {
            let l = &logs[t];
            out.push(',');
            push_fairness(&mut out, &l.fairness);
            let _ = write!(
                out,
                ",{},{},{},{},{}",
                l.rho,
                l.global_loss,
                l.eta,
                l.eta_applied,
                l.dropped_clients.len()
            );
        }
        out.push('\n');
    }
    out
}

/// Final-round per-client accuracy export, `client_id,accuracy`.
pub fn histogram_csv(accuracies: &[f64]) -> String {
    let mut out = String::from("client_id,accuracy\n");
    for (k, a) in accuracies.iter().enumerate() {
        let _ = writeln!(out, "{k},{a}");
    }
    out
}

/// Per-run summary: the fully resolved configuration and the final
/// round's aggregate state.
#[derive(Debug, Serialize)]
pub struct RunSummary<'a> {
    pub config: &'a FederationConfig,
    pub rounds_completed: usize,
    pub final_global_loss: f64,
    pub final_fairness: &'a FairnessReport,
}

/// Provenance record for one invocation. Written atomically before
/// round 0 with `finished_unix_ms` empty, rewritten with it set after
/// the last artifact lands; a missing finish timestamp marks an
/// interrupted run.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub code_version: &'static str,
    pub command: &'a str,
    pub config: &'a FederationConfig,
    pub artifacts: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, &text)
}
