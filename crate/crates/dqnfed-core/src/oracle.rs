//! Independent brute-force verifiers. Nothing here shares code with the
//! production paths it checks: the min-norm point is found iteratively
//! instead of in closed form, the inverse Hessian approximation is built
//! densely instead of via the two-loop recursion, and gradients come from
//! central differences instead of backpropagation.

use std::error::Error;
use std::fmt;

use crate::local::{CurvaturePair, CURVATURE_EPS};
use crate::vecops::{lincomb, DenseSymMatrix, ParamVector};

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    EmptyInput,
    CurvatureRejected { sy: f64 },
    NonFiniteValue,
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::EmptyInput => write!(f, "empty input"),
            OracleError::CurvatureRejected { sy } => {
                write!(f, "curvature pair rejected (s.y = {sy})")
            }
            OracleError::NonFiniteValue => write!(f, "objective returned a non-finite value"),
        }
    }
}

impl Error for OracleError {}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint {
    weights: Vec<f64>,
}

impl SimplexPoint {
    pub fn new(weights: Vec<f64>) -> Self {
        assert!(
            weights.iter().all(|w| *w >= 0.0),
            "negative simplex weight"
        );
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "weights sum to {sum}");
        SimplexPoint { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Default duality-gap tolerance; oracle runtime is irrelevant, accuracy
/// is everything.
pub const FW_DEFAULT_TOL: f64 = 1e-10;
pub const FW_DEFAULT_MAX_ITERS: usize = 100_000;

/// Minimal-norm point of the convex hull of `vectors` by the Frank-Wolfe
/// method (Frank and Wolfe 1956) with exact line search on each segment.
///
/// The linear minimization step picks the vertex most opposed to the
/// current point; the duality gap 2 x.(x - v*) bounds the objective
/// suboptimality of |x|^2 and stops the loop at `tol`. Deterministic:
/// starts from the shortest input vector, ties to the lowest index.
pub fn frank_wolfe_min_norm(
    vectors: &[ParamVector],
    max_iters: usize,
    tol: f64,
) -> Result<(SimplexPoint, ParamVector), OracleError> {
    if vectors.is_empty() {
        return Err(OracleError::EmptyInput);
    }
    let k = vectors.len();
    let start = (0..k)
        .min_by(|&a, &b| {
            vectors[a]
                .norm_sq()
                .partial_cmp(&vectors[b].norm_sq())
                .expect("finite norms")
        })
        .expect("nonempty");
    let mut x = vectors[start].clone();
    let mut lambda = vec![0.0; k];
    lambda[start] = 1.0;

    for _ in 0..max_iters {
        let mut best = 0;
        let mut best_val = x.dot(&vectors[0]);
        for (i, v) in vectors.iter().enumerate().skip(1) {
            let val = x.dot(v);
            if val < best_val {
                best_val = val;
                best = i;
            }
        }
        let gap = 2.0 * (x.norm_sq() - best_val);
        if gap <= tol {
            break;
        }
        // Exact line search on x + t (v - x) for |.|^2, t in [0, 1].
        let d = vectors[best].sub(&x);
        let dd = d.norm_sq();
        if dd == 0.0 {
            break;
        }
        let t = (-x.dot(&d) / dd).clamp(0.0, 1.0);
        if t == 0.0 {
            break;
        }
        x.axpy(t, &d);
        for w in lambda.iter_mut() {
            *w *= 1.0 - t;
        }
        lambda[best] += t;
    }

    // Exact renormalization guards against drift over many iterations.
    let sum: f64 = lambda.iter().sum();
    for w in lambda.iter_mut() {
        *w /= sum;
    }
    Ok((SimplexPoint::new(lambda), x))
}

/// Dense inverse-BFGS recurrence from a scaled identity H0 = h0_scale I:
/// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T, rho = 1/(s.y).
/// The textbook update (Nocedal and Wright, Numerical Optimization,
/// eq. 6.17) written out entrywise. Pass the limited-memory scaling
/// s.y / y.y of the newest pair as h0_scale to reproduce the two-loop
/// recursion's operator densely; pass 1 for the plain identity start.
pub fn dense_inverse_bfgs(
    pairs: &[CurvaturePair],
    order: usize,
    h0_scale: f64,
) -> Result<DenseSymMatrix, OracleError> {
    assert!(h0_scale > 0.0, "initial scaling must be positive");
    let mut h = DenseSymMatrix::identity(order);
    for i in 0..order {
        h.set(i, i, h0_scale);
    }
    for p in pairs {
        assert_eq!(p.s().len(), order, "pair does not match requested order");
        let sy = p.sy();
        if !(sy > CURVATURE_EPS * p.s().norm() * p.y().norm()) {
            return Err(OracleError::CurvatureRejected { sy });
        }
        let rho = 1.0 / sy;
        let hy = h.matvec(p.y());
        let yhy = p.y().dot(&hy);
        let s = p.s();
        let mut next = DenseSymMatrix::identity(order);
        for i in 0..order {
            for j in 0..order {
                let v = h.get(i, j) - rho * (s[i] * hy[j] + hy[i] * s[j])
                    + (rho * rho * yhy + rho) * s[i] * s[j];
                next.set(i, j, v);
            }
        }
        h = next;
    }
    Ok(h)
}

/// Central finite differences: ((f(x + h e_i) - f(x - h e_i)) / 2h)_i.
pub fn finite_diff_grad<F>(f: F, theta: &ParamVector, h: f64) -> Result<ParamVector, OracleError>
where
    F: Fn(&ParamVector) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let d = theta.len();
    let mut grad = vec![0.0; d];
    let mut probe = theta.clone();
    for i in 0..d {
        let orig = probe[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(OracleError::NonFiniteValue);
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(ParamVector::new(grad))
}

/// Objective value |sum_i w_i v_i|^2 for a given weighting; shared by the
/// equivalence checks between the closed-form weights and this oracle.
pub fn combination_norm_sq(weights: &[f64], vectors: &[ParamVector]) -> f64 {
    lincomb(weights, vectors)
        .expect("consistent lengths")
        .norm_sq()
}
