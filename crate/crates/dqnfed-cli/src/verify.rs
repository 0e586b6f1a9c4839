//! Numerical verification suites. Each suite sweeps randomized
//! instances of one contract, compares the production path against an
//! independent computation, and reports the worst observed error; a
//! single tolerance violation fails the suite. All sweeps are
//! deterministic, keyed by fixed per-suite seeds.

use dqnfed_core::aggregate::{optimal_weights, orthogonalize, plan_step, AggregationPlan};
use dqnfed_core::local::{bfgs_update_dense, lbfgs_apply, CurvaturePair};
use dqnfed_core::model::{self, Batch, ModelSpec};
use dqnfed_core::oracle::{
    combination_norm_sq, dense_inverse_bfgs, finite_diff_grad, frank_wolfe_min_norm,
    FW_DEFAULT_MAX_ITERS, FW_DEFAULT_TOL,
};
use dqnfed_core::rng;
use dqnfed_core::vecops::{DenseSymMatrix, ParamVector};

use rand::seq::SliceRandom;
use rand::Rng;

pub const SUITE_NAMES: &[&str] = &["rateid", "minnorm", "orderinv", "bfgs", "grad", "scale"];

const SEED_RATEID: u64 = 101;
const SEED_MINNORM: u64 = 102;
const SEED_ORDERINV: u64 = 103;
const SEED_BFGS: u64 = 104;
const SEED_GRAD: u64 = 105;
const SEED_SCALE: u64 = 106;

const TOL_RATE_IDENTITY: f64 = 1e-8;
const TOL_MINNORM_OBJ: f64 = 1e-6;
const TOL_MINNORM_WEIGHTS: f64 = 1e-4;
const TOL_ORDERINV: f64 = 1e-8;
const TOL_SECANT: f64 = 1e-10;
const TOL_TWO_LOOP: f64 = 1e-8;
const TOL_GRAD: f64 = 1e-5;
const TOL_SCALE: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;

/// Outcome of one suite sweep.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    /// Worst observed error across the sweep, in the units of the
    /// suite's tolerance.
    pub max_err: f64,
    pub failures: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "suite {:<9} {:>5} cases  max err {:>9.3e}  {}",
            self.name,
            self.cases,
            self.max_err,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// Runs one suite by name; `iters` overrides the default instance
/// count. Returns None for an unknown name.
pub fn run_suite(name: &str, iters: Option<usize>) -> Option<SuiteReport> {
    match name {
        "rateid" => Some(suite_rateid(iters.unwrap_or(1000))),
        "minnorm" => Some(suite_minnorm(iters.unwrap_or(500))),
        "orderinv" => Some(suite_orderinv(iters.unwrap_or(100))),
        "bfgs" => Some(suite_bfgs(iters.unwrap_or(1000))),
        "grad" => Some(suite_grad(iters.unwrap_or(200))),
        "scale" => Some(suite_scale(iters.unwrap_or(100))),
        _ => None,
    }
}

/// Runs every suite in declaration order.
pub fn run_all_suites(iters: Option<usize>) -> Vec<SuiteReport> {
    SUITE_NAMES
        .iter()
        .map(|n| run_suite(n, iters).expect("listed suite exists"))
        .collect()
}

fn random_vector(r: &mut impl Rng, d: usize) -> ParamVector {
    ParamVector::new((0..d).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn random_family(r: &mut impl Rng, k: usize, d: usize) -> (Vec<ParamVector>, Vec<f64>) {
    let grads = (0..k).map(|_| random_vector(r, d)).collect();
    let rates = (0..k).map(|_| r.random_range(0.1..4.0)).collect();
    (grads, rates)
}

fn vec_rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
    a.sub(b).norm() / b.norm().max(1e-300)
}

fn plan_for(grads: &[ParamVector], rates: &[f64]) -> Option<AggregationPlan> {
    let basis = orthogonalize(grads, rates).ok()?;
    if !basis.dropped().is_empty() {
        return None;
    }
    let lambdas = optimal_weights(&basis).ok()?;
    plan_step(&basis, &lambdas).ok()
}

/// Every retained client's directional derivative along the aggregate
/// direction equals its reported rate divided by the step size, and is
/// strictly positive.
fn suite_rateid(n: usize) -> SuiteReport {
    let mut max_err: f64 = 0.0;
    let mut failures = 0usize;
    for i in 0..n {
        let mut r = rng::stream_rng(SEED_RATEID, &[i as u64]);
        let k = r.random_range(1..=16);
        let d = r.random_range(k..=64);
        let (grads, rates) = random_family(&mut r, k, d);
        let Some(plan) = plan_for(&grads, &rates) else {
            failures += 1;
            continue;
        };
        for (j, &rate) in rates.iter().enumerate() {
            let expected = rate / plan.eta;
            let actual = plan.per_client_rate[j];
            let err = (actual - expected).abs() / expected.abs().max(1e-300);
            max_err = max_err.max(err);
            if err > TOL_RATE_IDENTITY || actual <= 0.0 {
                failures += 1;
            }
        }
    }
    SuiteReport {
        name: "rateid",
        cases: n,
        max_err,
        failures,
    }
}

/// The closed-form simplex weights and the Frank-Wolfe oracle agree on
/// both the minimal-norm objective and the weight vector.
fn suite_minnorm(n: usize) -> SuiteReport {
    let mut max_err: f64 = 0.0;
    let mut failures = 0usize;
    for i in 0..n {
        let mut r = rng::stream_rng(SEED_MINNORM, &[i as u64]);
        let k = r.random_range(2..=8);
        let d = r.random_range(k..=32);
        let (grads, rates) = random_family(&mut r, k, d);
        let basis = match orthogonalize(&grads, &rates) {
            Ok(b) if b.dropped().is_empty() => b,
            _ => {
                failures += 1;
                continue;
            }
        };
        let lambdas = optimal_weights(&basis).expect("nonempty basis");
        let (fw_weights, fw_point) =
            frank_wolfe_min_norm(basis.vectors(), FW_DEFAULT_MAX_ITERS, FW_DEFAULT_TOL)
                .expect("nonempty basis");
        let obj_diff = (combination_norm_sq(&lambdas, basis.vectors()) - fw_point.norm_sq()).abs();
        let weight_diff = lambdas
            .iter()
            .zip(fw_weights.weights())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        max_err = max_err.max(obj_diff).max(weight_diff);
        if obj_diff > TOL_MINNORM_OBJ || weight_diff > TOL_MINNORM_WEIGHTS {
            failures += 1;
        }
    }
    SuiteReport {
        name: "minnorm",
        cases: n,
        max_err,
        failures,
    }
}

/// Per-client directional derivatives are unchanged when the clients
/// are processed in a different order, although the intermediate
/// orthogonal bases differ.
fn suite_orderinv(n: usize) -> SuiteReport {
    let mut max_err: f64 = 0.0;
    let mut failures = 0usize;
    for i in 0..n {
        let mut r = rng::stream_rng(SEED_ORDERINV, &[i as u64]);
        let k = r.random_range(2..=10);
        let d = r.random_range(k..=32);
        let (grads, rates) = random_family(&mut r, k, d);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut r);
        let perm_grads: Vec<ParamVector> = perm.iter().map(|&j| grads[j].clone()).collect();
        let perm_rates: Vec<f64> = perm.iter().map(|&j| rates[j]).collect();
        let (Some(a), Some(b)) = (plan_for(&grads, &rates), plan_for(&perm_grads, &perm_rates))
        else {
            failures += 1;
            continue;
        };
        for (pos, &orig) in perm.iter().enumerate() {
            let err = (b.per_client_rate[pos] - a.per_client_rate[orig]).abs()
                / a.per_client_rate[orig].abs().max(1e-300);
            max_err = max_err.max(err);
            if err > TOL_ORDERINV {
                failures += 1;
            }
        }
    }
    SuiteReport {
        name: "orderinv",
        cases: n,
        max_err,
        failures,
    }
}

/// Draws a pair whose curvature is comfortably inside the guard:
/// y = (elementwise positive scaling of s) + small noise.
fn guarded_pair(r: &mut impl Rng, d: usize) -> CurvaturePair {
    loop {
        let s = random_vector(r, d);
        if s.norm() < 1e-2 {
            continue;
        }
        let y = ParamVector::new(
            s.as_slice()
                .iter()
                .map(|&v| v * r.random_range(0.5..2.0) + r.random_range(-0.05..0.05))
                .collect(),
        );
        if let Ok(p) = CurvaturePair::accept(s, y) {
            return p;
        }
    }
}

/// Direct updates satisfy the secant equation and stay symmetric
/// positive definite; the two-loop recursion reproduces the dense
/// inverse recurrence started from the same scaled identity.
fn suite_bfgs(n: usize) -> SuiteReport {
    let mut max_err: f64 = 0.0;
    let mut failures = 0usize;
    let pairs_n = n;
    let seq_n = n.div_ceil(5);

    for i in 0..pairs_n {
        let mut r = rng::stream_rng(SEED_BFGS, &[1, i as u64]);
        let d = r.random_range(2..=10);
        let mut b = DenseSymMatrix::identity(d);
        for _ in 0..r.random_range(0..=2) {
            b = bfgs_update_dense(&b, &guarded_pair(&mut r, d)).expect("guarded pair");
        }
        let p = guarded_pair(&mut r, d);
        let updated = bfgs_update_dense(&b, &p).expect("guarded pair");
        let secant_err = vec_rel_err(&updated.matvec(p.s()), p.y());
        max_err = max_err.max(secant_err);
        if secant_err > TOL_SECANT || updated.symmetry_error() > 1e-12 {
            failures += 1;
        }
        for _ in 0..3 {
            let v = random_vector(&mut r, d);
            if v.norm() > 1e-6 && v.dot(&updated.matvec(&v)) <= 0.0 {
                failures += 1;
            }
        }
    }

    for i in 0..seq_n {
        let mut r = rng::stream_rng(SEED_BFGS, &[2, i as u64]);
        let d = r.random_range(2..=10);
        let pairs: Vec<CurvaturePair> = (0..r.random_range(1..=8))
            .map(|_| guarded_pair(&mut r, d))
            .collect();
        let g = random_vector(&mut r, d);
        let two_loop = lbfgs_apply(&pairs, &g);
        let last = pairs.last().expect("nonempty");
        let gamma = last.sy() / last.y().norm_sq();
        let h = dense_inverse_bfgs(&pairs, d, gamma).expect("guarded pairs");
        let err = vec_rel_err(&two_loop, &h.matvec(&g));
        max_err = max_err.max(err);
        if err > TOL_TWO_LOOP {
            failures += 1;
        }
        for _ in 0..3 {
            let v = random_vector(&mut r, d);
            if v.norm() > 1e-6 && v.dot(&h.matvec(&v)) <= 0.0 {
                failures += 1;
            }
        }
    }

    SuiteReport {
        name: "bfgs",
        cases: pairs_n + seq_n,
        max_err,
        failures,
    }
}

/// Analytic model gradients against central finite differences.
fn suite_grad(n: usize) -> SuiteReport {
    let mut max_err: f64 = 0.0;
    let mut failures = 0usize;
    for i in 0..n {
        let mut r = rng::stream_rng(SEED_GRAD, &[i as u64]);
        let input_dim = r.random_range(2..=5);
        let num_classes = r.random_range(2..=4);
        let l2 = [0.0, 1e-3, 1e-2][r.random_range(0..3)];
        let spec = if i % 2 == 0 {
            ModelSpec::linear(input_dim, num_classes, l2)
        } else {
            ModelSpec::mlp(input_dim, r.random_range(2..=4), num_classes, l2)
        };
        let m = r.random_range(2..=6);
        let features: Vec<f64> = (0..m * input_dim)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..num_classes)).collect();
        let batch = Batch::new(features, input_dim, labels).expect("nonempty");
        let theta = ParamVector::new(
            (0..spec.param_count())
                .map(|_| r.random_range(-0.5..0.5))
                .collect(),
        );
        let (_, analytic) =
            model::loss_and_grad(&spec, &theta, &batch).expect("shapes consistent");
        let numeric = finite_diff_grad(
            |t| model::loss_and_grad(&spec, t, &batch).expect("shapes consistent").0,
            &theta,
            FD_STEP,
        )
        .expect("finite losses");
        let err = vec_rel_err(&analytic, &numeric);
        max_err = max_err.max(err);
        if err > TOL_GRAD {
            failures += 1;
        }
    }
    SuiteReport {
        name: "grad",
        cases: n,
        max_err,
        failures,
    }
}

/// Scaling behavior of the aggregate update eta * direction: rates
/// times c scales it by exactly c (basis vectors shrink by 1/c, weights
/// are untouched, the step grows by c^2); scaling gradients and rates
/// together leaves it invariant.
fn suite_scale(n: usize) -> SuiteReport {
    let mut max_err: f64 = 0.0;
    let mut failures = 0usize;
    for i in 0..n {
        let mut r = rng::stream_rng(SEED_SCALE, &[i as u64]);
        let k = r.random_range(2..=8);
        let d = r.random_range(k..=24);
        let (grads, rates) = random_family(&mut r, k, d);
        let Some(base) = plan_for(&grads, &rates) else {
            failures += 1;
            continue;
        };
        let update = base.direction.scaled(base.eta);
        for c in [1e-3, 1.0, 1e3] {
            let scaled_rates: Vec<f64> = rates.iter().map(|v| c * v).collect();
            let joint_grads: Vec<ParamVector> = grads.iter().map(|g| g.scaled(c)).collect();
            let (Some(by_rate), Some(joint)) = (
                plan_for(&grads, &scaled_rates),
                plan_for(&joint_grads, &scaled_rates),
            ) else {
                failures += 1;
                continue;
            };
            let rate_err = vec_rel_err(&by_rate.direction.scaled(by_rate.eta), &update.scaled(c));
            let joint_err = vec_rel_err(&joint.direction.scaled(joint.eta), &update);
            max_err = max_err.max(rate_err).max(joint_err);
            if rate_err > TOL_SCALE || joint_err > TOL_SCALE {
                failures += 1;
            }
        }
    }
    SuiteReport {
        name: "scale",
        cases: n,
        max_err,
        failures,
    }
}
