//! The federation round loop: sample participants, run local epochs on
//! each, aggregate with the configured method, evaluate, log. The whole
//! trajectory is a pure function of the configuration; one master seed
//! expands into independent named streams (dataset, partition, init,
//! per-round sampling, per-client batching) so changing the round count
//! never perturbs earlier rounds.
//!
//! Client work runs on the worker pool when the `parallel` feature is
//! on; reduction order is fixed by ascending client id either way, so
//! output is identical to sequential execution.

use std::error::Error;
use std::fmt;
use std::mem;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::aggregate::{self, AggregateError};
use crate::data::{self, DataError, Dataset, Partition};
use crate::exec;
use crate::local::{
    self, run_local_epochs, BatchSpec, ClientReport, CurvaturePair, LocalError, LocalObjective,
    LocalRun, QuadraticObjective,
};
use crate::metrics::{self, FairnessReport, MetricsError};
use crate::model::{self, ModelError, ModelSpec};
use crate::rng;
use crate::vecops::{DenseSymMatrix, ParamVector};

/// Tail fraction reported in the round log (worst/best 10%).
pub const REPORT_TAIL_FRACTION: f64 = 0.1;

/// Largest parameter count the dense curvature mode accepts; the d x d
/// matrix per client is meant for small diagnostic problems.
pub const DENSE_MODE_MAX_DIM: usize = 512;

#[derive(Debug)]
pub enum OrchestratorError {
    InvalidConfig(String),
    Data(DataError),
    Model(ModelError),
    Local {
        round: usize,
        client: usize,
        source: LocalError,
    },
    Aggregate {
        round: usize,
        source: AggregateError,
    },
    Metrics(MetricsError),
}

impl fmt::Display for OrchestratorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrchestratorError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            OrchestratorError::Data(e) => write!(f, "dataset error: {e}"),
            OrchestratorError::Model(e) => write!(f, "model error: {e}"),
            OrchestratorError::Local { round, client, source } => {
                write!(f, "round {round}, client {client}: {source}")
            }
            OrchestratorError::Aggregate { round, source } => {
                write!(f, "round {round}, aggregation: {source}")
            }
            OrchestratorError::Metrics(e) => write!(f, "metrics error: {e}"),
        }
    }
}

impl Error for OrchestratorError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            OrchestratorError::Data(e) => Some(e),
            OrchestratorError::Model(e) => Some(e),
            OrchestratorError::Local { source, .. } => Some(source),
            OrchestratorError::Aggregate { source, .. } => Some(source),
            OrchestratorError::Metrics(e) => Some(e),
            OrchestratorError::InvalidConfig(_) => None,
        }
    }
}

impl From<DataError> for OrchestratorError {
    fn from(e: DataError) -> Self {
        OrchestratorError::Data(e)
    }
}

impl From<ModelError> for OrchestratorError {
    fn from(e: ModelError) -> Self {
        OrchestratorError::Model(e)
    }
}

impl From<MetricsError> for OrchestratorError {
    fn from(e: MetricsError) -> Self {
        OrchestratorError::Metrics(e)
    }
}

/// Aggregation method for the global step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    #[serde(rename = "dqnfed")]
    DqnFed,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "newton-avg")]
    NewtonAvg,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::DqnFed => "dqnfed",
            Method::FedAvg => "fedavg",
            Method::NewtonAvg => "newton-avg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dqnfed" => Ok(Method::DqnFed),
            "fedavg" => Ok(Method::FedAvg),
            "newton-avg" => Ok(Method::NewtonAvg),
            other => Err(format!(
                "unknown method '{other}' (expected dqnfed, fedavg, or newton-avg)"
            )),
        }
    }
}

/// How clients maintain their curvature estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BfgsMode {
    /// Limited-memory two-loop recursion over the last `memory` pairs.
    TwoLoop { memory: usize },
    /// Explicit d x d Hessian approximation per client.
    Dense,
}

/// Where client samples come from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    /// Gaussian class blobs generated on the fly.
    Blobs {
        num_classes: usize,
        per_class: usize,
        input_dim: usize,
        spread: f64,
    },
    /// Comma-delimited feature file with a trailing integer label.
    Delimited { path: PathBuf, num_classes: usize },
    /// Analytic quadratic clients with adversarially placed minima; no
    /// model or partition applies.
    Quadratics { dim: usize },
}

/// How dataset rows are assigned to clients.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionConfig {
    /// Sort-by-label sharding; each client draws `shards_per_client`
    /// shards.
    Shard { shards_per_client: usize },
    /// Dirichlet class allocation with concentration `beta`.
    Dirichlet { beta: f64, min_size: usize },
}

/// Everything a federated run depends on. The trajectory is a pure
/// function of this value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FederationConfig {
    pub method: Method,
    pub model: Option<ModelSpec>,
    pub dataset: DatasetConfig,
    pub partition: Option<PartitionConfig>,
    pub num_clients: usize,
    pub participation_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub batch_size: BatchSpec,
    pub bfgs_mode: BfgsMode,
    pub clip_enabled: bool,
    pub master_seed: u64,
    pub eval_every: usize,
}

impl FederationConfig {
    /// Parameter dimension of the global model.
    pub fn param_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Quadratics { dim } => *dim,
            _ => self.model.as_ref().map_or(0, |m| m.param_count()),
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let fail = |msg: String| Err(OrchestratorError::InvalidConfig(msg));
        if self.num_clients < 1 {
            return fail("num_clients must be at least 1".into());
        }
        if self.rounds < 1 {
            return fail("rounds must be at least 1".into());
        }
        if self.local_epochs < 1 {
            return fail("local_epochs must be at least 1".into());
        }
        if self.eval_every < 1 {
            return fail("eval_every must be at least 1".into());
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return fail(format!(
                "participation_fraction must be in (0, 1], got {}",
                self.participation_fraction
            ));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return fail(format!("local_lr must be positive, got {}", self.local_lr));
        }
        if self.batch_size == BatchSpec::Size(0) {
            return fail("batch_size must be at least 1".into());
        }
        if let BfgsMode::TwoLoop { memory } = self.bfgs_mode {
            if memory < 1 {
                return fail("bfgs_memory must be at least 1".into());
            }
        }
        match &self.dataset {
            DatasetConfig::Quadratics { dim } => {
                if *dim < 2 {
                    return fail("quadratics dim must be at least 2".into());
                }
                if self.num_clients < 2 {
                    return fail("quadratics benchmark needs at least 2 clients".into());
                }
                if self.model.is_some() {
                    return fail("quadratics runs take no [model] section".into());
                }
                if self.partition.is_some() {
                    return fail("quadratics runs take no [partition] section".into());
                }
            }
            DatasetConfig::Blobs {
                num_classes,
                per_class,
                input_dim,
                spread,
            } => {
                if *num_classes < 1 || *per_class < 1 || *input_dim < 1 {
                    return fail("blobs dimensions must be at least 1".into());
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return fail(format!("blobs spread must be nonnegative, got {spread}"));
                }
                let spec = self.require_model()?;
                if spec.input_dim != *input_dim {
                    return fail(format!(
                        "model input_dim {} does not match dataset input_dim {input_dim}",
                        spec.input_dim
                    ));
                }
                if spec.num_classes != *num_classes {
                    return fail(format!(
                        "model num_classes {} does not match dataset num_classes {num_classes}",
                        spec.num_classes
                    ));
                }
                self.require_partition()?;
            }
            DatasetConfig::Delimited { num_classes, .. } => {
                if *num_classes < 1 {
                    return fail("num_classes must be at least 1".into());
                }
                let spec = self.require_model()?;
                if spec.num_classes != *num_classes {
                    return fail(format!(
                        "model num_classes {} does not match dataset num_classes {num_classes}",
                        spec.num_classes
                    ));
                }
                self.require_partition()?;
            }
        }
        if let PartitionConfig::Dirichlet { beta, .. } = self.partition.as_ref().unwrap_or(
            // Quadratics reach here with no partition; any valid stand-in
            // does, it is never read.
            &PartitionConfig::Shard { shards_per_client: 1 },
        ) {
            if !(*beta > 0.0 && beta.is_finite()) {
                return fail(format!("dirichlet beta must be positive, got {beta}"));
            }
        }
        if self.bfgs_mode == BfgsMode::Dense && self.param_dim() > DENSE_MODE_MAX_DIM {
            return fail(format!(
                "dense curvature mode supports at most {DENSE_MODE_MAX_DIM} parameters, model has {}",
                self.param_dim()
            ));
        }
        Ok(())
    }

    fn require_model(&self) -> Result<&ModelSpec, OrchestratorError> {
        self.model.as_ref().ok_or_else(|| {
            OrchestratorError::InvalidConfig("this dataset requires a [model] section".into())
        })
    }

    fn require_partition(&self) -> Result<&PartitionConfig, OrchestratorError> {
        self.partition.as_ref().ok_or_else(|| {
            OrchestratorError::InvalidConfig("this dataset requires a [partition] section".into())
        })
    }
}

/// One round's record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Sampled client ids, ascending.
    pub participating: Vec<usize>,
    pub fairness: FairnessReport,
    /// Fraction of participants whose loss did not increase across the
    /// global step, both losses under the global models.
    pub rho: f64,
    /// Sample-weighted mean of every client's loss at the new model.
    pub global_loss: f64,
    pub eta: f64,
    pub eta_applied: f64,
    /// Participants excluded from the basis by a degeneracy guard.
    pub dropped_clients: Vec<usize>,
    /// Participants whose rate estimate collapsed and was floored.
    pub rate_floored: Vec<usize>,
    pub wallclock_ms: u64,
}

/// Full result of a federated run.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub logs: Vec<RoundLog>,
    pub final_params: ParamVector,
    /// Per-client accuracy at the final model, all clients.
    pub final_accuracies: Vec<f64>,
    /// Per-client full-batch loss at the final model, all clients.
    pub final_losses: Vec<f64>,
}

/// Deterministic participant sample for one round: ceil(fraction * K)
/// distinct ids, ascending, drawn from a stream keyed by (seed, round)
/// only, cf. the 10% device sampling of McMahan et al. 2017.
pub fn sample_clients(
    num_clients: usize,
    fraction: f64,
    master_seed: u64,
    round: u64,
) -> Vec<usize> {
    assert!(num_clients >= 1, "no clients to sample");
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "fraction must be in (0, 1]"
    );
    let m = ((fraction * num_clients as f64).ceil() as usize).clamp(1, num_clients);
    let mut r = rng::stream_rng(master_seed, &[rng::STREAM_SAMPLING, round]);
    let mut ids = rand::seq::index::sample(&mut r, num_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

const STIFF_CURVATURE: f64 = 4.0;
const STIFF_OFFSET: f64 = 1.0;
const SOFT_CURVATURE: f64 = 1.0;
const SOFT_OFFSET: f64 = 2.0;
const CENTER_JITTER: f64 = 0.05;

/// Benchmark family of isotropic quadratic clients split into two
/// equal cohorts with opposed minima on one axis: the first half stiff
/// and close (curvature 4, minimum near +1), the second half soft and
/// far (curvature 1, minimum near -2). The offsets compensate the
/// curvatures so every client starts at the same loss, and a step
/// direction constrained to hurt nobody keeps the contested coordinate
/// pinned near that balance. Plain gradient averaging instead drifts
/// to the curvature-weighted mean of the minima, which sits well
/// inside one cohort's half and leaves the other cohort with several
/// times the loss, round after round. Jitter on every coordinate keeps
/// the gradient family linearly independent.
pub fn conflicting_quadratics(
    num_clients: usize,
    dim: usize,
    seed: u64,
) -> Vec<QuadraticObjective> {
    assert!(num_clients >= 2, "need both cohorts");
    assert!(dim >= 2, "need room for a conflict axis");
    let mut r = rng::stream_rng(seed, &[]);
    let normal = rand_distr::Normal::new(0.0, CENTER_JITTER).expect("valid normal");
    (0..num_clients)
        .map(|k| {
            let stiff = k < num_clients / 2;
            let mut center: Vec<f64> = (0..dim).map(|_| r.sample(normal)).collect();
            let (a, offset) = if stiff {
                (STIFF_CURVATURE, STIFF_OFFSET)
            } else {
                (SOFT_CURVATURE, -SOFT_OFFSET)
            };
            center[1] += offset;
            QuadraticObjective::isotropic(a, ParamVector::new(center))
        })
        .collect()
}

/// Per-client curvature memory carried across rounds.
#[derive(Debug, Clone)]
enum CurvatureState {
    TwoLoop {
        pairs: Vec<CurvaturePair>,
        memory: usize,
    },
    Dense {
        b: DenseSymMatrix,
    },
}

impl CurvatureState {
    fn new(mode: BfgsMode, dim: usize) -> CurvatureState {
        match mode {
            BfgsMode::TwoLoop { memory } => CurvatureState::TwoLoop {
                pairs: Vec::with_capacity(memory),
                memory,
            },
            BfgsMode::Dense => CurvatureState::Dense {
                b: DenseSymMatrix::identity(dim),
            },
        }
    }

    /// Cheap stand-in while the real state is out with a worker.
    fn vacant() -> CurvatureState {
        CurvatureState::TwoLoop {
            pairs: Vec::new(),
            memory: 1,
        }
    }

    fn absorb(&mut self, fresh: &[CurvaturePair]) {
        match self {
            CurvatureState::TwoLoop { pairs, memory } => {
                for p in fresh {
                    if pairs.len() == *memory {
                        pairs.remove(0);
                    }
                    pairs.push(p.clone());
                }
            }
            CurvatureState::Dense { b } => {
                for p in fresh {
                    // The guard already admitted the pair; a residual
                    // failure here means the update would destroy the
                    // approximation, so the pair is skipped instead.
                    if let Ok(next) = local::bfgs_update_dense(b, p) {
                        *b = next;
                    }
                }
            }
        }
    }

    fn rate(&self, grad: &ParamVector) -> Result<f64, LocalError> {
        match self {
            CurvatureState::TwoLoop { pairs, .. } => local::rate_estimate_lbfgs(pairs, grad),
            CurvatureState::Dense { b } => local::rate_estimate_dense(b, grad),
        }
    }

    /// The client's own quasi-Newton direction, for the averaging
    /// baseline.
    fn direction(&self, grad: &ParamVector) -> ParamVector {
        match self {
            CurvatureState::TwoLoop { pairs, .. } => local::lbfgs_apply(pairs, grad),
            CurvatureState::Dense { b } => b.solve_spd(grad).unwrap_or_else(|_| grad.clone()),
        }
    }
}

/// A concrete set of client objectives.
enum Problem {
    Model {
        ds: Dataset,
        spec: ModelSpec,
        train: Vec<Vec<usize>>,
        test: Vec<Vec<usize>>,
    },
    Quadratics {
        objectives: Vec<QuadraticObjective>,
    },
}

/// Borrowed view of one client's objective, usable from workers.
enum ClientView<'a> {
    Model(ModelObjective<'a>),
    Quad(&'a QuadraticObjective),
}

/// Adapts a (dataset, train indices, model) triple to the local
/// optimization interface. Shapes were validated up front, so model
/// errors here are programming errors.
struct ModelObjective<'a> {
    spec: &'a ModelSpec,
    ds: &'a Dataset,
    train: &'a [usize],
}

impl LocalObjective for ModelObjective<'_> {
    fn num_samples(&self) -> usize {
        self.train.len()
    }

    fn loss_and_grad(&self, theta: &ParamVector) -> (f64, ParamVector) {
        let batch = self.ds.batch_of(self.train);
        model::loss_and_grad(self.spec, theta, &batch).expect("shapes validated at build")
    }

    fn subset_grad(&self, theta: &ParamVector, positions: &[usize]) -> ParamVector {
        let rows: Vec<usize> = positions.iter().map(|&p| self.train[p]).collect();
        let batch = self.ds.batch_of(&rows);
        model::loss_and_grad(self.spec, theta, &batch)
            .expect("shapes validated at build")
            .1
    }
}

impl LocalObjective for ClientView<'_> {
    fn num_samples(&self) -> usize {
        match self {
            ClientView::Model(m) => m.num_samples(),
            ClientView::Quad(q) => q.num_samples(),
        }
    }

    fn loss_and_grad(&self, theta: &ParamVector) -> (f64, ParamVector) {
        match self {
            ClientView::Model(m) => m.loss_and_grad(theta),
            ClientView::Quad(q) => q.loss_and_grad(theta),
        }
    }

    fn subset_grad(&self, theta: &ParamVector, positions: &[usize]) -> ParamVector {
        match self {
            ClientView::Model(m) => m.subset_grad(theta, positions),
            ClientView::Quad(q) => q.subset_grad(theta, positions),
        }
    }
}

impl Problem {
    fn build(cfg: &FederationConfig) -> Result<Problem, OrchestratorError> {
        match &cfg.dataset {
            DatasetConfig::Quadratics { dim } => Ok(Problem::Quadratics {
                objectives: conflicting_quadratics(
                    cfg.num_clients,
                    *dim,
                    rng::derive_seed(cfg.master_seed, &[rng::STREAM_DATASET]),
                ),
            }),
            DatasetConfig::Blobs {
                num_classes,
                per_class,
                input_dim,
                spread,
            } => {
                let ds = data::gen_blobs(
                    *num_classes,
                    *per_class,
                    *input_dim,
                    *spread,
                    rng::derive_seed(cfg.master_seed, &[rng::STREAM_DATASET]),
                );
                Problem::from_dataset(cfg, ds)
            }
            DatasetConfig::Delimited { path, num_classes } => {
                let ds = data::load_delimited(path, *num_classes)?;
                let spec = cfg.require_model()?;
                if ds.input_dim() != spec.input_dim {
                    return Err(OrchestratorError::InvalidConfig(format!(
                        "model input_dim {} does not match file input_dim {}",
                        spec.input_dim,
                        ds.input_dim()
                    )));
                }
                Problem::from_dataset(cfg, ds)
            }
        }
    }

    fn from_dataset(cfg: &FederationConfig, ds: Dataset) -> Result<Problem, OrchestratorError> {
        let spec = cfg.require_model()?.clone();
        let seed = rng::derive_seed(cfg.master_seed, &[rng::STREAM_PARTITION]);
        let partition: Partition = match cfg.require_partition()? {
            PartitionConfig::Shard { shards_per_client } => {
                data::shard_partition(&ds, cfg.num_clients, *shards_per_client, seed)?
            }
            PartitionConfig::Dirichlet { beta, min_size } => {
                data::dirichlet_partition(&ds, cfg.num_clients, *beta, seed, *min_size)?
            }
        };
        let mut train = Vec::with_capacity(cfg.num_clients);
        let mut test = Vec::with_capacity(cfg.num_clients);
        for k in 0..cfg.num_clients {
            let split_seed = rng::derive_seed(cfg.master_seed, &[rng::STREAM_SPLIT, k as u64]);
            let (tr, te) = data::train_test_split(partition.client(k), split_seed);
            train.push(tr);
            test.push(te);
        }
        Ok(Problem::Model { ds, spec, train, test })
    }

    fn view(&self, k: usize) -> ClientView<'_> {
        match self {
            Problem::Model { ds, spec, train, .. } => ClientView::Model(ModelObjective {
                spec,
                ds,
                train: &train[k],
            }),
            Problem::Quadratics { objectives } => ClientView::Quad(&objectives[k]),
        }
    }

    fn num_samples(&self, k: usize) -> usize {
        match self {
            Problem::Model { train, .. } => train[k].len(),
            Problem::Quadratics { .. } => 1,
        }
    }

    fn init_params(&self, cfg: &FederationConfig) -> ParamVector {
        let seed = rng::derive_seed(cfg.master_seed, &[rng::STREAM_INIT]);
        match self {
            Problem::Model { spec, .. } => model::init_params(spec, seed),
            Problem::Quadratics { objectives } => {
                let dim = objectives[0].center().len();
                let mut r = rng::stream_rng(seed, &[]);
                ParamVector::new(
                    (0..dim)
                        .map(|_| r.random_range(-model::INIT_SCALE..model::INIT_SCALE))
                        .collect(),
                )
            }
        }
    }

    fn train_loss(&self, k: usize, theta: &ParamVector) -> f64 {
        self.view(k).loss_and_grad(theta).0
    }

    /// Per-client accuracy at `theta`. Model clients score their
    /// held-out split; quadratic clients report 1/(1+loss), a bounded
    /// monotone surrogate that cannot underflow at large losses, with
    /// the loss recoverable as 1/acc - 1.
    fn accuracy(&self, k: usize, theta: &ParamVector) -> f64 {
        match self {
            Problem::Model { ds, spec, test, .. } => {
                let batch = ds.batch_of(&test[k]);
                model::accuracy(spec, theta, &batch).expect("shapes validated at build")
            }
            Problem::Quadratics { objectives } => {
                1.0 / (1.0 + objectives[k].loss_and_grad(theta).0)
            }
        }
    }
}

struct ClientOutcome {
    client_id: usize,
    state: CurvatureState,
    run: LocalRun,
    rate: f64,
    rate_floored: bool,
    direction: Option<ParamVector>,
}

/// Executes the configured number of federation rounds. Deterministic
/// given the config; worker parallelism cannot change any output.
pub fn run_federation(cfg: &FederationConfig) -> Result<FederationOutcome, OrchestratorError> {
    cfg.validate()?;
    let problem = Problem::build(cfg)?;
    run_with_problem(cfg, &problem)
}

fn run_with_problem(
    cfg: &FederationConfig,
    problem: &Problem,
) -> Result<FederationOutcome, OrchestratorError> {
    let k_total = cfg.num_clients;
    let dim = match problem {
        Problem::Model { spec, .. } => spec.param_count(),
        Problem::Quadratics { objectives } => objectives[0].center().len(),
    };
    let mut theta = problem.init_params(cfg);
    let mut theta_prev = theta.clone();
    let mut states: Vec<CurvatureState> = (0..k_total)
        .map(|_| CurvatureState::new(cfg.bfgs_mode, dim))
        .collect();
    let mut logs: Vec<RoundLog> = Vec::with_capacity(cfg.rounds);
    let mut last_fairness: Option<FairnessReport> = None;
    let mut final_accuracies = vec![0.0; k_total];
    let mut final_losses = vec![0.0; k_total];

    for t in 0..cfg.rounds {
        let started = Instant::now();
        let participants = sample_clients(
            k_total,
            cfg.participation_fraction,
            cfg.master_seed,
            t as u64,
        );

        // Local phase. Each participant's curvature state travels into
        // the worker closure and back, so the update and the rate
        // estimate stay with the client's own data.
        let work: Vec<(usize, CurvatureState)> = participants
            .iter()
            .map(|&k| (k, mem::replace(&mut states[k], CurvatureState::vacant())))
            .collect();
        let method = cfg.method;
        let theta_ref = &theta;
        let prev_ref = &theta_prev;
        let results: Vec<Result<ClientOutcome, (usize, LocalError)>> =
            exec::map_ordered(work, |(k, mut state)| {
                let seed = rng::derive_seed(
                    cfg.master_seed,
                    &[rng::STREAM_CLIENT, k as u64, t as u64],
                );
                let run = run_local_epochs(
                    &problem.view(k),
                    theta_ref,
                    prev_ref,
                    cfg.local_epochs,
                    cfg.local_lr,
                    cfg.batch_size,
                    seed,
                )
                .map_err(|e| (k, e))?;
                if method != Method::FedAvg {
                    state.absorb(&run.pairs);
                }
                let (rate, rate_floored) = if method == Method::DqnFed {
                    match state.rate(&run.grad) {
                        Ok(r) => (r, false),
                        Err(LocalError::DegenerateRate { .. }) => (local::RATE_FLOOR, true),
                        Err(e) => return Err((k, e)),
                    }
                } else {
                    (1.0, false)
                };
                let direction = if method == Method::NewtonAvg {
                    Some(state.direction(&run.grad))
                } else {
                    None
                };
                Ok(ClientOutcome {
                    client_id: k,
                    state,
                    run,
                    rate,
                    rate_floored,
                    direction,
                })
            });
        let mut outcomes = Vec::with_capacity(participants.len());
        for r in results {
            match r {
                Ok(o) => outcomes.push(o),
                Err((client, source)) => {
                    return Err(OrchestratorError::Local {
                        round: t,
                        client,
                        source,
                    })
                }
            }
        }
        for o in &mut outcomes {
            states[o.client_id] = mem::replace(&mut o.state, CurvatureState::vacant());
        }

        let reports: Vec<ClientReport> = outcomes
            .iter()
            .map(|o| ClientReport {
                client_id: o.client_id,
                grad: o.run.grad.clone(),
                rate: o.rate,
                num_samples: problem.num_samples(o.client_id),
                loss_before: o.run.loss_before,
                loss_after: o.run.loss_after,
            })
            .collect();
        let rate_floored: Vec<usize> = outcomes
            .iter()
            .filter(|o| o.rate_floored)
            .map(|o| o.client_id)
            .collect();

        // Global step.
        let agg_err = |source| OrchestratorError::Aggregate { round: t, source };
        let (theta_next, eta, eta_applied, dropped_clients) = match cfg.method {
            Method::DqnFed => {
                let grads: Vec<ParamVector> = reports.iter().map(|r| r.grad.clone()).collect();
                let rates: Vec<f64> = reports.iter().map(|r| r.rate).collect();
                match aggregate::orthogonalize(&grads, &rates) {
                    Ok(basis) => {
                        let lambdas = aggregate::optimal_weights(&basis).map_err(agg_err)?;
                        let mut plan = aggregate::plan_step(&basis, &lambdas).map_err(agg_err)?;
                        let clip = if cfg.clip_enabled {
                            aggregate::step_clip(
                                &rates,
                                outcomes.iter().flat_map(|o| o.run.pairs.iter()),
                            )
                        } else {
                            None
                        };
                        let next = aggregate::apply_global_step(&theta, &mut plan, clip);
                        let dropped = basis
                            .dropped()
                            .iter()
                            .map(|&pos| participants[pos])
                            .collect();
                        (next, plan.eta, plan.eta_applied, dropped)
                    }
                    // Every participant's gradient vanished: the model
                    // is stationary for all of them, take a zero step.
                    Err(AggregateError::AllClientsDegenerate) => {
                        (theta.clone(), 0.0, 0.0, participants.clone())
                    }
                    Err(e) => return Err(agg_err(e)),
                }
            }
            Method::FedAvg => {
                let next = aggregate::fedavg_aggregate(&reports, &theta, cfg.local_lr)
                    .map_err(agg_err)?;
                (next, cfg.local_lr, cfg.local_lr, Vec::new())
            }
            Method::NewtonAvg => {
                let dirs: Vec<ParamVector> = outcomes
                    .iter()
                    .map(|o| o.direction.clone().expect("set for newton-avg"))
                    .collect();
                let next = aggregate::newton_avg_aggregate(&dirs, &theta, cfg.local_lr)
                    .map_err(agg_err)?;
                (next, cfg.local_lr, cfg.local_lr, Vec::new())
            }
        };

        // Evaluation at the new global model: every client's loss (for
        // the weighted mean and the participant outcomes), accuracy on
        // eval rounds.
        let eval_round = t % cfg.eval_every == 0 || t + 1 == cfg.rounds;
        let next_ref = &theta_next;
        let evals: Vec<(f64, Option<f64>)> = exec::map_ordered((0..k_total).collect(), |k| {
            let loss = problem.train_loss(k, next_ref);
            let acc = eval_round.then(|| problem.accuracy(k, next_ref));
            (loss, acc)
        });
        let losses_next: Vec<f64> = evals.iter().map(|e| e.0).collect();

        let before: Vec<f64> = reports.iter().map(|r| r.loss_before).collect();
        let after: Vec<f64> = participants.iter().map(|&k| losses_next[k]).collect();
        let rho = metrics::improved_fraction(&before, &after)?;

        let total_samples: f64 = (0..k_total).map(|k| problem.num_samples(k) as f64).sum();
        let global_loss = (0..k_total)
            .map(|k| problem.num_samples(k) as f64 * losses_next[k])
            .sum::<f64>()
            / total_samples;

        let fairness = if eval_round {
            let accs: Vec<f64> = evals
                .iter()
                .map(|e| e.1.expect("computed on eval rounds"))
                .collect();
            let report = metrics::fairness_report(&accs, REPORT_TAIL_FRACTION)?;
            if t + 1 == cfg.rounds {
                final_accuracies = accs;
            }
            last_fairness = Some(report.clone());
            report
        } else {
            last_fairness.clone().expect("round 0 always evaluates")
        };
        if t + 1 == cfg.rounds {
            final_losses = losses_next;
        }

        theta_prev = mem::replace(&mut theta, theta_next);
        logs.push(RoundLog {
            round: t,
            participating: participants,
            fairness,
            rho,
            global_loss,
            eta,
            eta_applied,
            dropped_clients,
            rate_floored,
            wallclock_ms: started.elapsed().as_millis() as u64,
        });
    }

    Ok(FederationOutcome {
        logs,
        final_params: theta,
        final_accuracies,
        final_losses,
    })
}
