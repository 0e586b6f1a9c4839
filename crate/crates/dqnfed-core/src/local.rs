//! Client-side work for one communication round: local (S)GD epochs,
//! curvature-pair maintenance, and the quasi-Newton estimate of how fast
//! the local loss would fall under the client's own curvature-corrected
//! step. That scalar, `rate`, is what the server's aggregation consumes.
//!
//! Two curvature engines are provided. The default keeps a bounded window
//! of displacement pairs and applies the limited-memory two-loop
//! recursion (Nocedal 1980); the dense engine maintains the classical
//! direct Hessian approximation B and solves with it. Both are protected
//! by the standard curvature condition s.y > 0, enforced with a relative
//! guard.

use std::error::Error;
use std::fmt;

use crate::rng;
use crate::vecops::{DenseSymMatrix, ParamVector, VecOpsError};

/// Relative curvature guard: accept a pair only if s.y > eps * |s| * |y|.
pub const CURVATURE_EPS: f64 = 1e-10;

/// Smallest rate a client may report; anything at or below it is
/// degenerate and must be flagged by the caller.
pub const RATE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum LocalError {
    /// Pair failed the curvature condition; caller keeps its state.
    CurvatureRejected { sy: f64 },
    /// s^T B s <= 0; the dense update is undefined.
    SingularDenominator { sbs: f64 },
    /// Rate collapsed to the floor or below; caller substitutes
    /// [`RATE_FLOOR`] and flags the client.
    DegenerateRate { value: f64 },
    /// Loss or parameters stopped being finite during local training.
    NonFiniteLoss { epoch: usize },
    Matrix(VecOpsError),
}

impl fmt::Display for LocalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocalError::CurvatureRejected { sy } => {
                write!(f, "curvature pair rejected (s.y = {sy})")
            }
            LocalError::SingularDenominator { sbs } => {
                write!(f, "singular BFGS denominator (s.Bs = {sbs})")
            }
            LocalError::DegenerateRate { value } => {
                write!(f, "degenerate rate estimate {value}")
            }
            LocalError::NonFiniteLoss { epoch } => {
                write!(f, "non-finite loss during local epoch {epoch}")
            }
            LocalError::Matrix(e) => write!(f, "matrix failure: {e}"),
        }
    }
}

impl Error for LocalError {}

impl From<VecOpsError> for LocalError {
    fn from(e: VecOpsError) -> Self {
        LocalError::Matrix(e)
    }
}

/// One accepted displacement pair: s is the parameter change between
/// consecutive local iterates, y the gradient change. Construction
/// enforces the curvature guard, so every pair in circulation satisfies
/// s.y > CURVATURE_EPS * |s| * |y|.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    s: ParamVector,
    y: ParamVector,
    sy: f64,
}

impl CurvaturePair {
    pub fn accept(s: ParamVector, y: ParamVector) -> Result<Self, LocalError> {
        assert_eq!(s.len(), y.len(), "pair components differ in length");
        let sy = s.dot(&y);
        if !s.is_finite() || !y.is_finite() || !(sy > CURVATURE_EPS * s.norm() * y.norm()) {
            return Err(LocalError::CurvatureRejected { sy });
        }
        Ok(CurvaturePair { s, y, sy })
    }

    pub fn s(&self) -> &ParamVector {
        &self.s
    }

    pub fn y(&self) -> &ParamVector {
        &self.y
    }

    pub fn sy(&self) -> f64 {
        self.sy
    }
}

/// One client's round report, as sent to the server.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: usize,
    /// Full-batch gradient at the final local iterate.
    pub grad: ParamVector,
    /// Quasi-Newton rate estimate; strictly positive (floored upstream).
    pub rate: f64,
    pub num_samples: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Mini-batch size for local epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSpec {
    Full,
    Size(usize),
}

/// A differentiable local objective over a client's samples. Full-batch
/// and subset gradients must be consistent: the full gradient is the
/// sample mean plus any regularizer, subset gradients the mean over the
/// given positions plus the same regularizer.
pub trait LocalObjective {
    fn num_samples(&self) -> usize;
    /// Full-batch loss and gradient.
    fn loss_and_grad(&self, theta: &ParamVector) -> (f64, ParamVector);
    /// Mean gradient over a subset of local sample positions.
    fn subset_grad(&self, theta: &ParamVector, positions: &[usize]) -> ParamVector;
}

/// Quadratic objective f(theta) = 1/2 sum_i a_i (theta_i - c_i)^2 with
/// diagonal curvature. Serves as an analytically tractable client for
/// benchmarks and as the degenerate "regularizer-only" model in tests.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    a_diag: Vec<f64>,
    center: ParamVector,
}

impl QuadraticObjective {
    pub fn new(a_diag: Vec<f64>, center: ParamVector) -> Self {
        assert_eq!(a_diag.len(), center.len(), "curvature/center mismatch");
        assert!(a_diag.iter().all(|a| *a > 0.0), "curvature must be positive");
        QuadraticObjective { a_diag, center }
    }

    /// Isotropic special case 1/2 a |theta - c|^2.
    pub fn isotropic(a: f64, center: ParamVector) -> Self {
        QuadraticObjective::new(vec![a; center.len()], center)
    }

    pub fn center(&self) -> &ParamVector {
        &self.center
    }

    pub fn curvature(&self) -> &[f64] {
        &self.a_diag
    }
}

impl LocalObjective for QuadraticObjective {
    fn num_samples(&self) -> usize {
        1
    }

    fn loss_and_grad(&self, theta: &ParamVector) -> (f64, ParamVector) {
        assert_eq!(theta.len(), self.center.len(), "dimension mismatch");
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let delta = theta[i] - self.center[i];
            loss += 0.5 * self.a_diag[i] * delta * delta;
            grad[i] = self.a_diag[i] * delta;
        }
        (loss, ParamVector::new(grad))
    }

    fn subset_grad(&self, theta: &ParamVector, _positions: &[usize]) -> ParamVector {
        self.loss_and_grad(theta).1
    }
}

/// Result of one client's local round.
#[derive(Debug, Clone)]
pub struct LocalRun {
    pub final_params: ParamVector,
    /// Pairs that passed the curvature guard, oldest first.
    pub pairs: Vec<CurvaturePair>,
    /// Full-batch gradient at `final_params`.
    pub grad: ParamVector,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Runs E local epochs of (stochastic) gradient descent from the current
/// global model `theta_t`.
///
/// Curvature pairs are formed between consecutive epoch-boundary
/// iterates, seeded by the pair between the previous and current global
/// models (theta_t - theta_prev, grad(theta_t) - grad(theta_prev)). The
/// final epoch's trailing pair is not emitted; there is no later iterate
/// inside the round for it to inform. Gradients entering pairs and the
/// report are always full-batch, so pair quality does not depend on the
/// mini-batch schedule.
///
/// With `theta_prev == theta_t` (the first round) the seed pair has s = 0
/// and is skipped; the run then contributes E - 1 candidate pairs.
pub fn run_local_epochs<O: LocalObjective>(
    obj: &O,
    theta_t: &ParamVector,
    theta_prev: &ParamVector,
    epochs: usize,
    lr: f64,
    batch: BatchSpec,
    seed: u64,
) -> Result<LocalRun, LocalError> {
    assert!(epochs >= 1, "need at least one local epoch");
    assert_eq!(theta_t.len(), theta_prev.len(), "global model length changed");

    let (loss_before, grad_t) = obj.loss_and_grad(theta_t);
    if !loss_before.is_finite() || !grad_t.is_finite() {
        return Err(LocalError::NonFiniteLoss { epoch: 0 });
    }

    let mut candidates: Vec<(ParamVector, ParamVector)> = Vec::with_capacity(epochs);
    let seed_s = theta_t.sub(theta_prev);
    if seed_s.norm_sq() > 0.0 {
        let (_, grad_prev) = obj.loss_and_grad(theta_prev);
        candidates.push((seed_s, grad_t.sub(&grad_prev)));
    }

    let n = obj.num_samples();
    let mut cur = theta_t.clone();
    let mut cur_grad = grad_t;
    for e in 1..=epochs {
        let next = match batch {
            BatchSpec::Full => {
                let g = if e == 1 {
                    cur_grad.clone()
                } else {
                    obj.loss_and_grad(&cur).1
                };
                let mut p = cur.clone();
                p.axpy(-lr, &g);
                p
            }
            BatchSpec::Size(b) => {
                assert!(b >= 1, "batch size must be positive");
                let mut order: Vec<usize> = (0..n).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng::stream_rng(seed, &[e as u64]));
                let mut p = cur.clone();
                for chunk in order.chunks(b) {
                    let g = obj.subset_grad(&p, chunk);
                    p.axpy(-lr, &g);
                }
                p
            }
        };
        if !next.is_finite() {
            return Err(LocalError::NonFiniteLoss { epoch: e });
        }
        if e < epochs {
            let (_, g_next) = obj.loss_and_grad(&next);
            candidates.push((next.sub(&cur), g_next.sub(&cur_grad)));
            cur_grad = g_next;
        }
        cur = next;
    }

    let (loss_after, grad) = obj.loss_and_grad(&cur);
    if !loss_after.is_finite() || !grad.is_finite() {
        return Err(LocalError::NonFiniteLoss { epoch: epochs });
    }

    let pairs = candidates
        .into_iter()
        .filter_map(|(s, y)| CurvaturePair::accept(s, y).ok())
        .collect();

    Ok(LocalRun {
        final_params: cur,
        pairs,
        grad,
        loss_before,
        loss_after,
    })
}

/// Classical direct BFGS update of the Hessian approximation:
/// B' = B - B s s^T B / (s^T B s) + y y^T / (s^T y).
/// Preserves symmetry by construction and positive definiteness under the
/// curvature guard; the secant condition B' s = y holds exactly.
pub fn bfgs_update_dense(
    b: &DenseSymMatrix,
    pair: &CurvaturePair,
) -> Result<DenseSymMatrix, LocalError> {
    let n = b.order();
    assert_eq!(pair.s().len(), n, "pair does not match matrix order");
    let sy = pair.sy();
    if !(sy > CURVATURE_EPS * pair.s().norm() * pair.y().norm()) {
        return Err(LocalError::CurvatureRejected { sy });
    }
    let bs = b.matvec(pair.s());
    let sbs = pair.s().dot(&bs);
    if sbs <= 0.0 {
        return Err(LocalError::SingularDenominator { sbs });
    }
    let mut out = b.clone();
    let y = pair.y();
    for i in 0..n {
        for j in 0..n {
            let v = out.get(i, j) - bs[i] * bs[j] / sbs + y[i] * y[j] / sy;
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Two-loop recursion: multiplies the limited-memory inverse-Hessian
/// approximation built from `pairs` (oldest first) into `g`.
/// Initial scaling s.y / y.y comes from the most recent pair; with no
/// pairs this is the identity.
pub fn lbfgs_apply(pairs: &[CurvaturePair], g: &ParamVector) -> ParamVector {
    let mut q = g.clone();
    if pairs.is_empty() {
        return q;
    }
    let mut alphas = vec![0.0; pairs.len()];
    for (i, p) in pairs.iter().enumerate().rev() {
        let alpha = p.s().dot(&q) / p.sy();
        q.axpy(-alpha, p.y());
        alphas[i] = alpha;
    }
    let last = pairs.last().expect("nonempty");
    let gamma = last.sy() / last.y().norm_sq();
    let mut r = q.scaled(gamma);
    for (i, p) in pairs.iter().enumerate() {
        let beta = p.y().dot(&r) / p.sy();
        r.axpy(alphas[i] - beta, p.s());
    }
    r
}

/// Rate estimate g^T H g with H the limited-memory inverse approximation.
/// This is the first-order loss decrease the client would realize under
/// its own curvature-corrected step.
pub fn rate_estimate_lbfgs(pairs: &[CurvaturePair], g: &ParamVector) -> Result<f64, LocalError> {
    let rate = g.dot(&lbfgs_apply(pairs, g));
    if !(rate > RATE_FLOOR) {
        return Err(LocalError::DegenerateRate { value: rate });
    }
    Ok(rate)
}

/// Rate estimate g^T B^{-1} g for the dense engine; solves with B rather
/// than inverting it.
pub fn rate_estimate_dense(b: &DenseSymMatrix, g: &ParamVector) -> Result<f64, LocalError> {
    let x = b.solve_spd(g)?;
    let rate = g.dot(&x);
    if !(rate > RATE_FLOOR) {
        return Err(LocalError::DegenerateRate { value: rate });
    }
    Ok(rate)
}
