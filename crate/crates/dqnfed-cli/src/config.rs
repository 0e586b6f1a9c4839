//! TOML configuration loading with strict key checking.
//!
//! Unknown keys are rejected with a nearest-known-key suggestion, so a
//! typo cannot silently fall back to a default. Absent optional keys
//! take documented defaults; the fully resolved configuration is echoed
//! into the run manifest and summary, so every artifact records what
//! actually ran.

use std::fmt;
use std::path::{Path, PathBuf};

use dqnfed_core::local::BatchSpec;
use dqnfed_core::model::{ModelKind, ModelSpec};
use dqnfed_core::orchestrator::{
    BfgsMode, DatasetConfig, FederationConfig, Method, PartitionConfig,
};
use toml::value::Table;
use toml::Value;

pub const DEFAULT_PARTICIPATION: f64 = 1.0;
pub const DEFAULT_LOCAL_EPOCHS: usize = 2;
pub const DEFAULT_LOCAL_LR: f64 = 0.05;
pub const DEFAULT_BFGS_MEMORY: usize = 10;
pub const DEFAULT_QUADRATICS_DIM: usize = 20;
pub const DEFAULT_BLOBS_SPREAD: f64 = 0.5;

#[derive(Debug)]
pub enum ConfigError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Syntax {
        path: PathBuf,
        message: String,
    },
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },
    MissingKey {
        key: String,
    },
    BadValue {
        key: String,
        reason: String,
    },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => {
                write!(f, "cannot read config {}: {source}", path.display())
            }
            ConfigError::Syntax { path, message } => {
                write!(f, "config {} is not valid TOML: {message}", path.display())
            }
            ConfigError::UnknownKey { key, suggestion } => {
                write!(f, "unknown key `{key}`")?;
                if let Some(s) = suggestion {
                    write!(f, " (did you mean `{s}`?)")?;
                }
                Ok(())
            }
            ConfigError::MissingKey { key } => write!(f, "missing required key `{key}`"),
            ConfigError::BadValue { key, reason } => write!(f, "bad value for `{key}`: {reason}"),
            ConfigError::Invalid(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ConfigError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// One table of the document plus its dotted prefix for error messages.
struct Section<'a> {
    table: &'a Table,
    prefix: &'a str,
}

fn nearest(key: &str, known: &[&str]) -> Option<String> {
    known
        .iter()
        .min_by_key(|k| strsim::levenshtein(key, k))
        .map(|s| s.to_string())
}

impl<'a> Section<'a> {
    fn qualified(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    /// Rejects any key outside `known`, suggesting the closest match.
    fn check_keys(&self, known: &[&str]) -> Result<(), ConfigError> {
        for k in self.table.keys() {
            if !known.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey {
                    key: self.qualified(k),
                    suggestion: nearest(k, known).map(|s| {
                        if self.prefix.is_empty() {
                            s
                        } else {
                            format!("{}.{s}", self.prefix)
                        }
                    }),
                });
            }
        }
        Ok(())
    }

    fn value(&self, key: &str) -> Option<&'a Value> {
        self.table.get(key)
    }

    fn require(&self, key: &str) -> Result<&'a Value, ConfigError> {
        self.value(key).ok_or(ConfigError::MissingKey {
            key: self.qualified(key),
        })
    }

    fn bad(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            key: self.qualified(key),
            reason: reason.into(),
        }
    }

    fn str_req(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.require(key)?
            .as_str()
            .ok_or_else(|| self.bad(key, "expected a string"))
    }

    fn usize_req(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self
            .require(key)?
            .as_integer()
            .ok_or_else(|| self.bad(key, "expected an integer"))?;
        usize::try_from(v).map_err(|_| self.bad(key, "expected a non-negative integer"))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.value(key) {
            None => Ok(default),
            Some(_) => self.usize_req(key),
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.value(key) {
            None => Ok(default),
            Some(v) => {
                let n = v
                    .as_integer()
                    .ok_or_else(|| self.bad(key, "expected an integer"))?;
                u64::try_from(n).map_err(|_| self.bad(key, "expected a non-negative integer"))
            }
        }
    }

    fn f64_req(&self, key: &str) -> Result<f64, ConfigError> {
        match self.require(key)? {
            Value::Float(x) => Ok(*x),
            Value::Integer(n) => Ok(*n as f64),
            _ => Err(self.bad(key, "expected a number")),
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.value(key) {
            None => Ok(default),
            Some(_) => self.f64_req(key),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.value(key) {
            None => Ok(default),
            Some(v) => v
                .as_bool()
                .ok_or_else(|| self.bad(key, "expected true or false")),
        }
    }

    /// Optional sub-table; an existing non-table value is an error.
    fn section(&self, key: &'a str) -> Result<Option<Section<'a>>, ConfigError> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(Section {
                table: t,
                prefix: key,
            })),
            Some(_) => Err(self.bad(key, "expected a table (a [section])")),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "method",
    "num_clients",
    "rounds",
    "participation_fraction",
    "local_epochs",
    "local_lr",
    "batch_size",
    "clip_enabled",
    "master_seed",
    "eval_every",
    "bfgs",
    "dataset",
    "model",
    "partition",
];

/// Reads and fully validates a configuration file.
pub fn parse_config(path: &Path) -> Result<FederationConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, path)
}

/// Same as [`parse_config`] for already-loaded text; `path` only labels
/// error messages.
pub fn parse_config_str(text: &str, path: &Path) -> Result<FederationConfig, ConfigError> {
    let value: Value = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let table = value.as_table().expect("toml document root is a table");
    let root = Section { table, prefix: "" };
    root.check_keys(TOP_KEYS)?;

    let method: Method = root
        .str_req("method")?
        .parse()
        .map_err(|e: String| root.bad("method", e))?;

    let batch_size = match root.value("batch_size") {
        None => BatchSpec::Full,
        Some(Value::String(s)) if s == "full" => BatchSpec::Full,
        Some(Value::Integer(n)) if *n >= 1 => BatchSpec::Size(*n as usize),
        Some(_) => {
            return Err(root.bad("batch_size", "expected \"full\" or a positive integer"))
        }
    };

    let bfgs_mode = match root.section("bfgs")? {
        None => BfgsMode::TwoLoop {
            memory: DEFAULT_BFGS_MEMORY,
        },
        Some(s) => parse_bfgs(&s)?,
    };
    let dataset = match root.section("dataset")? {
        None => DatasetConfig::Quadratics {
            dim: DEFAULT_QUADRATICS_DIM,
        },
        Some(s) => parse_dataset(&s)?,
    };
    let model = match root.section("model")? {
        None => None,
        Some(s) => Some(parse_model(&s)?),
    };
    let partition = match root.section("partition")? {
        None => None,
        Some(s) => Some(parse_partition(&s)?),
    };

    let cfg = FederationConfig {
        method,
        model,
        dataset,
        partition,
        num_clients: root.usize_req("num_clients")?,
        participation_fraction: root.f64_or("participation_fraction", DEFAULT_PARTICIPATION)?,
        rounds: root.usize_req("rounds")?,
        local_epochs: root.usize_or("local_epochs", DEFAULT_LOCAL_EPOCHS)?,
        local_lr: root.f64_or("local_lr", DEFAULT_LOCAL_LR)?,
        batch_size,
        bfgs_mode,
        clip_enabled: root.bool_or("clip_enabled", true)?,
        master_seed: root.u64_or("master_seed", 0)?,
        eval_every: root.usize_or("eval_every", 1)?,
    };
    cfg.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

fn parse_bfgs(s: &Section) -> Result<BfgsMode, ConfigError> {
    s.check_keys(&["mode", "memory"])?;
    let mode = match s.value("mode") {
        None => "two-loop",
        Some(v) => v
            .as_str()
            .ok_or_else(|| s.bad("mode", "expected a string"))?,
    };
    match mode {
        "two-loop" => Ok(BfgsMode::TwoLoop {
            memory: s.usize_or("memory", DEFAULT_BFGS_MEMORY)?,
        }),
        "dense" => {
            if s.value("memory").is_some() {
                return Err(s.bad("memory", "only applies to mode \"two-loop\""));
            }
            Ok(BfgsMode::Dense)
        }
        other => Err(s.bad(
            "mode",
            format!("unknown mode {other:?} (expected two-loop or dense)"),
        )),
    }
}

fn parse_dataset(s: &Section) -> Result<DatasetConfig, ConfigError> {
    match s.str_req("kind")? {
        "quadratics" => {
            s.check_keys(&["kind", "dim"])?;
            Ok(DatasetConfig::Quadratics {
                dim: s.usize_or("dim", DEFAULT_QUADRATICS_DIM)?,
            })
        }
        "blobs" => {
            s.check_keys(&["kind", "num_classes", "per_class", "input_dim", "spread"])?;
            Ok(DatasetConfig::Blobs {
                num_classes: s.usize_req("num_classes")?,
                per_class: s.usize_req("per_class")?,
                input_dim: s.usize_req("input_dim")?,
                spread: s.f64_or("spread", DEFAULT_BLOBS_SPREAD)?,
            })
        }
        "delimited" => {
            s.check_keys(&["kind", "path", "num_classes"])?;
            Ok(DatasetConfig::Delimited {
                path: PathBuf::from(s.str_req("path")?),
                num_classes: s.usize_req("num_classes")?,
            })
        }
        other => Err(s.bad(
            "kind",
            format!("unknown dataset kind {other:?} (expected quadratics, blobs, or delimited)"),
        )),
    }
}

fn parse_model(s: &Section) -> Result<ModelSpec, ConfigError> {
    match s.str_req("kind")? {
        "linear-softmax" => {
            s.check_keys(&["kind", "input_dim", "num_classes", "l2_reg"])?;
            Ok(ModelSpec {
                kind: ModelKind::LinearSoftmax,
                input_dim: s.usize_req("input_dim")?,
                num_classes: s.usize_req("num_classes")?,
                hidden_dim: 0,
                l2_reg: s.f64_or("l2_reg", 0.0)?,
            })
        }
        "mlp1h" => {
            s.check_keys(&["kind", "input_dim", "num_classes", "hidden_dim", "l2_reg"])?;
            Ok(ModelSpec {
                kind: ModelKind::Mlp1h,
                input_dim: s.usize_req("input_dim")?,
                num_classes: s.usize_req("num_classes")?,
                hidden_dim: s.usize_req("hidden_dim")?,
                l2_reg: s.f64_or("l2_reg", 0.0)?,
            })
        }
        other => Err(s.bad(
            "kind",
            format!("unknown model kind {other:?} (expected linear-softmax or mlp1h)"),
        )),
    }
}

fn parse_partition(s: &Section) -> Result<PartitionConfig, ConfigError> {
    match s.str_req("kind")? {
        "dirichlet" => {
            s.check_keys(&["kind", "beta", "min_size"])?;
            Ok(PartitionConfig::Dirichlet {
                beta: s.f64_req("beta")?,
                min_size: s.usize_or("min_size", 1)?,
            })
        }
        "shard" => {
            s.check_keys(&["kind", "shards_per_client"])?;
            Ok(PartitionConfig::Shard {
                shards_per_client: s.usize_req("shards_per_client")?,
            })
        }
        other => Err(s.bad(
            "kind",
            format!("unknown partition kind {other:?} (expected dirichlet or shard)"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<FederationConfig, ConfigError> {
        parse_config_str(text, Path::new("test.toml"))
    }

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let cfg = parse("method = \"dqnfed\"\nnum_clients = 4\nrounds = 2\n").unwrap();
        assert_eq!(cfg.method, Method::DqnFed);
        assert_eq!(cfg.num_clients, 4);
        assert_eq!(cfg.rounds, 2);
        assert_eq!(cfg.participation_fraction, DEFAULT_PARTICIPATION);
        assert_eq!(cfg.local_epochs, DEFAULT_LOCAL_EPOCHS);
        assert_eq!(cfg.local_lr, DEFAULT_LOCAL_LR);
        assert_eq!(cfg.batch_size, BatchSpec::Full);
        assert_eq!(
            cfg.bfgs_mode,
            BfgsMode::TwoLoop {
                memory: DEFAULT_BFGS_MEMORY
            }
        );
        assert!(cfg.clip_enabled);
        assert_eq!(cfg.master_seed, 0);
        assert_eq!(
            cfg.dataset,
            DatasetConfig::Quadratics {
                dim: DEFAULT_QUADRATICS_DIM
            }
        );
        assert!(cfg.model.is_none());
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = parse("method = \"dqnfed\"\nnum_clients = 4\nrounds = 2\nlearning_rat = 0.1\n")
            .unwrap_err();
        match &err {
            ConfigError::UnknownKey { key, suggestion } => {
                assert_eq!(key, "learning_rat");
                assert!(suggestion.is_some(), "no suggestion offered");
            }
            other => panic!("expected UnknownKey, got {other}"),
        }
        assert!(err.to_string().contains("did you mean"));
    }

    #[test]
    fn unknown_nested_key_is_qualified() {
        let err = parse(
            "method = \"dqnfed\"\nnum_clients = 4\nrounds = 2\n\
             [dataset]\nkind = \"blobs\"\nnum_classes = 3\nper_class = 10\n\
             input_dim = 2\nsprad = 0.3\n",
        )
        .unwrap_err();
        match err {
            ConfigError::UnknownKey { key, suggestion } => {
                assert_eq!(key, "dataset.sprad");
                assert_eq!(suggestion.as_deref(), Some("dataset.spread"));
            }
            other => panic!("expected UnknownKey, got {other}"),
        }
    }

    #[test]
    fn zero_participation_is_rejected_by_validation() {
        let err = parse(
            "method = \"dqnfed\"\nnum_clients = 4\nrounds = 2\nparticipation_fraction = 0.0\n",
        )
        .unwrap_err();
        match err {
            ConfigError::Invalid(msg) => assert!(msg.contains("participation_fraction")),
            other => panic!("expected Invalid, got {other}"),
        }
    }

    #[test]
    fn full_model_config_round_trips() {
        let cfg = parse(
            "method = \"fedavg\"\nnum_clients = 5\nrounds = 3\nbatch_size = 8\n\
             master_seed = 9\n\
             [model]\nkind = \"linear-softmax\"\ninput_dim = 2\nnum_classes = 3\nl2_reg = 1e-3\n\
             [dataset]\nkind = \"blobs\"\nnum_classes = 3\nper_class = 30\ninput_dim = 2\n\
             [partition]\nkind = \"dirichlet\"\nbeta = 0.5\nmin_size = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.batch_size, BatchSpec::Size(8));
        assert_eq!(cfg.model.as_ref().unwrap().l2_reg, 1e-3);
        assert_eq!(
            cfg.partition,
            Some(PartitionConfig::Dirichlet {
                beta: 0.5,
                min_size: 2
            })
        );
        match cfg.dataset {
            DatasetConfig::Blobs { spread, .. } => assert_eq!(spread, DEFAULT_BLOBS_SPREAD),
            other => panic!("wrong dataset {other:?}"),
        }
    }

    #[test]
    fn bad_method_and_bad_types_name_the_key() {
        let err = parse("method = \"sgd\"\nnum_clients = 4\nrounds = 2\n").unwrap_err();
        assert!(err.to_string().contains("method"));
        let err = parse("method = \"dqnfed\"\nnum_clients = \"four\"\nrounds = 2\n").unwrap_err();
        assert!(err.to_string().contains("num_clients"));
        let err =
            parse("method = \"dqnfed\"\nnum_clients = 4\nrounds = 2\nbatch_size = 0\n").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
        let err = parse("method = \"dqnfed\"\nnum_clients = 4\nrounds = 2\nmaster_seed = -1\n")
            .unwrap_err();
        assert!(err.to_string().contains("master_seed"));
    }

    #[test]
    fn dense_mode_rejects_memory_key() {
        let err = parse(
            "method = \"dqnfed\"\nnum_clients = 4\nrounds = 2\n[bfgs]\nmode = \"dense\"\nmemory = 5\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("bfgs.memory"));
    }

    #[test]
    fn missing_required_key_is_reported() {
        let err = parse("method = \"dqnfed\"\nrounds = 2\n").unwrap_err();
        match err {
            ConfigError::MissingKey { key } => assert_eq!(key, "num_clients"),
            other => panic!("expected MissingKey, got {other}"),
        }
    }
}
