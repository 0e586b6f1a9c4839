//! Server-side aggregation. The fair quasi-Newton path orthogonalizes
//! client gradients with a rate-scaled Gram-Schmidt recurrence, takes the
//! closed-form min-norm combination of the scaled basis, and steps with a
//! learning rate that matches each client's quasi-Newton rate target.
//! Plain gradient averaging and naive Newton-direction averaging are the
//! baselines.
//!
//! The load-bearing identity, asserted throughout the test suite: for
//! every retained client, g_k . d equals rate_k / sum_j (1 / |b_j|^2)
//! where d is the combined direction and b_j the scaled basis vectors.
//! It holds because each client's basis vector absorbs exactly the part
//! of its rate not already covered by projections onto earlier clients.

use std::error::Error;
use std::fmt;

use crate::local::{ClientReport, CurvaturePair};
use crate::vecops::{lincomb, ParamVector};

/// A client whose post-projection residual is below this fraction of its
/// gradient norm is linearly dependent on earlier clients and dropped.
pub const RESIDUAL_DROP_TOL: f64 = 1e-10;

/// A client whose scaling denominator is below this in absolute value
/// had its rate exactly absorbed by projections and is dropped.
pub const DENOMINATOR_DROP_TOL: f64 = 1e-12;

/// Orthogonality level that triggers one classical re-orthogonalization
/// refinement pass.
pub const REORTH_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum AggregateError {
    /// Every client fell to a degeneracy guard; no basis exists.
    AllClientsDegenerate,
    /// A retained basis vector has zero squared norm.
    ZeroNormBasisVector { index: usize },
    LengthMismatch { left: usize, right: usize },
    EmptyInput,
}

impl fmt::Display for AggregateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregateError::AllClientsDegenerate => {
                write!(f, "all clients degenerate under orthogonalization")
            }
            AggregateError::ZeroNormBasisVector { index } => {
                write!(f, "basis vector {index} has zero norm")
            }
            AggregateError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            AggregateError::EmptyInput => write!(f, "empty input"),
        }
    }
}

impl Error for AggregateError {}

/// The orthogonalized, rate-scaled gradient family plus bookkeeping.
/// Index positions follow processing order (ascending client position in
/// the input slices); `retained` maps basis entries back to inputs.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    vectors: Vec<ParamVector>,
    denominators: Vec<f64>,
    retained: Vec<usize>,
    dropped: Vec<usize>,
    negative_denominators: Vec<usize>,
    grads: Vec<ParamVector>,
    rates: Vec<f64>,
}

impl OrthoBasis {
    /// Scaled basis vectors, one per retained client.
    pub fn vectors(&self) -> &[ParamVector] {
        &self.vectors
    }

    /// Scaling denominators: rate_k minus the projection coefficients.
    pub fn denominators(&self) -> &[f64] {
        &self.denominators
    }

    /// Input positions of retained clients, ascending.
    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// Input positions excluded by a degeneracy guard.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// Retained input positions whose denominator was negative; their
    /// rate target is negative, which callers should surface.
    pub fn negative_denominators(&self) -> &[usize] {
        &self.negative_denominators
    }

    /// Original gradients of retained clients, basis order.
    pub fn retained_grads(&self) -> &[ParamVector] {
        &self.grads
    }

    /// Original rates of retained clients, basis order.
    pub fn retained_rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Worst pairwise cosine among retained basis vectors.
    pub fn max_orthogonality(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.vectors.len() {
            for j in (i + 1)..self.vectors.len() {
                let denom = self.vectors[i].norm() * self.vectors[j].norm();
                if denom > 0.0 {
                    worst = worst.max(self.vectors[i].dot(&self.vectors[j]).abs() / denom);
                }
            }
        }
        worst
    }

    /// Worst relative residual of any retained gradient against the span
    /// of its basis prefix.
    pub fn max_reconstruction_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, g) in self.grads.iter().enumerate() {
            let mut resid = g.clone();
            for b in &self.vectors[..=k] {
                let c = resid.dot(b) / b.norm_sq();
                resid.axpy(-c, b);
            }
            let g_norm = g.norm();
            if g_norm > 0.0 {
                worst = worst.max(resid.norm() / g_norm);
            }
        }
        worst
    }
}

/// Rate-scaled Gram-Schmidt orthogonalization, clients in ascending
/// input order.
///
/// Client k's basis vector is its gradient minus projections onto all
/// earlier basis vectors, divided by rate_k minus the accumulated
/// projection coefficients. Coefficients are computed modified-GS style
/// against the running residual, and the same coefficient sum enters the
/// denominator, which is what makes the proportionality identity exact
/// up to rounding. One classical refinement pass runs when the residual
/// keeps a cosine above [`REORTH_TOL`] toward any earlier vector
/// (cf. Giraud et al. 2005 on two-pass Gram-Schmidt).
///
/// Degenerate clients (zero gradient, dependent gradient, or absorbed
/// denominator) are dropped and reported; negative denominators are kept
/// as written but flagged.
pub fn orthogonalize(
    grads: &[ParamVector],
    rates: &[f64],
) -> Result<OrthoBasis, AggregateError> {
    if grads.is_empty() {
        return Err(AggregateError::EmptyInput);
    }
    if grads.len() != rates.len() {
        return Err(AggregateError::LengthMismatch {
            left: grads.len(),
            right: rates.len(),
        });
    }
    let mut basis = OrthoBasis {
        vectors: Vec::with_capacity(grads.len()),
        denominators: Vec::with_capacity(grads.len()),
        retained: Vec::with_capacity(grads.len()),
        dropped: Vec::new(),
        negative_denominators: Vec::new(),
        grads: Vec::with_capacity(grads.len()),
        rates: Vec::with_capacity(grads.len()),
    };
    for (k, g) in grads.iter().enumerate() {
        assert!(g.is_finite(), "non-finite gradient at position {k}");
        let g_norm = g.norm();
        if g_norm == 0.0 {
            basis.dropped.push(k);
            continue;
        }
        let mut resid = g.clone();
        let mut coeff_sum = 0.0;
        for b in &basis.vectors {
            let c = resid.dot(b) / b.norm_sq();
            resid.axpy(-c, b);
            coeff_sum += c;
        }
        // A lost digit budget above REORTH_TOL earns one more pass.
        let needs_refinement = basis.vectors.iter().any(|b| {
            let denom = resid.norm() * b.norm();
            denom > 0.0 && resid.dot(b).abs() / denom > REORTH_TOL
        });
        if needs_refinement {
            for b in &basis.vectors {
                let c = resid.dot(b) / b.norm_sq();
                resid.axpy(-c, b);
                coeff_sum += c;
            }
        }
        if resid.norm() <= RESIDUAL_DROP_TOL * g_norm {
            basis.dropped.push(k);
            continue;
        }
        let denominator = rates[k] - coeff_sum;
        if denominator.abs() < DENOMINATOR_DROP_TOL {
            basis.dropped.push(k);
            continue;
        }
        if denominator < 0.0 {
            basis.negative_denominators.push(k);
        }
        basis.vectors.push(resid.scaled(1.0 / denominator));
        basis.denominators.push(denominator);
        basis.retained.push(k);
        basis.grads.push(g.clone());
        basis.rates.push(rates[k]);
    }
    if basis.retained.is_empty() {
        return Err(AggregateError::AllClientsDegenerate);
    }
    Ok(basis)
}

/// Closed-form min-norm weights over the scaled basis:
/// lambda_k proportional to 1 / |b_k|^2, normalized to the simplex.
/// For an orthogonal family this is exactly the minimal-norm element of
/// the convex hull; the iterative oracle in `oracle` cross-checks it.
pub fn optimal_weights(basis: &OrthoBasis) -> Result<Vec<f64>, AggregateError> {
    let mut inv = Vec::with_capacity(basis.len());
    for (i, b) in basis.vectors().iter().enumerate() {
        let nsq = b.norm_sq();
        if nsq == 0.0 {
            return Err(AggregateError::ZeroNormBasisVector { index: i });
        }
        inv.push(1.0 / nsq);
    }
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / total).collect())
}

/// Weights, direction, and step size for one aggregation round.
#[derive(Debug, Clone)]
pub struct AggregationPlan {
    pub lambdas: Vec<f64>,
    pub direction: ParamVector,
    /// Newton-rate-matched step: sum_k 1 / |b_k|^2.
    pub eta: f64,
    /// Step actually taken after the optional clip.
    pub eta_applied: f64,
    /// g_k . direction per retained client, basis order. Equals
    /// rate_k / sum_j (1 / |b_j|^2) up to rounding.
    pub per_client_rate: Vec<f64>,
}

/// Combines the basis under the given weights and derives the step.
pub fn plan_step(basis: &OrthoBasis, lambdas: &[f64]) -> Result<AggregationPlan, AggregateError> {
    if lambdas.len() != basis.len() {
        return Err(AggregateError::LengthMismatch {
            left: lambdas.len(),
            right: basis.len(),
        });
    }
    let direction = lincomb(lambdas, basis.vectors()).expect("validated lengths");
    let eta: f64 = basis.vectors().iter().map(|b| 1.0 / b.norm_sq()).sum();
    let per_client_rate = basis
        .retained_grads()
        .iter()
        .map(|g| g.dot(&direction))
        .collect();
    Ok(AggregationPlan {
        lambdas: lambdas.to_vec(),
        direction,
        eta,
        eta_applied: eta,
        per_client_rate,
    })
}

/// Takes the global step theta - eta * direction, clipping eta first
/// when a cap is supplied. Records the applied step in the plan.
pub fn apply_global_step(
    theta: &ParamVector,
    plan: &mut AggregationPlan,
    clip: Option<f64>,
) -> ParamVector {
    plan.eta_applied = match clip {
        Some(c) => plan.eta.min(c),
        None => plan.eta,
    };
    let mut next = theta.clone();
    next.axpy(-plan.eta_applied, &plan.direction);
    next
}

/// Step-size cap from the sufficient decrease condition: with smoothness
/// estimated as the largest |y| / |s| over the round's curvature pairs,
/// any step up to (2 / L) * min_k rate_k cannot increase a retained
/// client's loss. Returns None when the round produced no pairs.
pub fn step_clip<'a>(
    rates: &[f64],
    pairs: impl IntoIterator<Item = &'a CurvaturePair>,
) -> Option<f64> {
    let l_hat = pairs
        .into_iter()
        .map(|p| p.y().norm() / p.s().norm())
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        })?;
    let min_rate = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min_rate.is_finite() || l_hat <= 0.0 {
        return None;
    }
    Some(2.0 / l_hat * min_rate)
}

/// Sample-weighted gradient averaging: theta - lr * sum_k w_k g_k with
/// w_k proportional to the client's sample count (McMahan et al. 2017).
pub fn fedavg_aggregate(
    reports: &[ClientReport],
    theta: &ParamVector,
    lr: f64,
) -> Result<ParamVector, AggregateError> {
    if reports.is_empty() {
        return Err(AggregateError::EmptyInput);
    }
    let total: f64 = reports.iter().map(|r| r.num_samples as f64).sum();
    let mut next = theta.clone();
    for r in reports {
        next.axpy(-lr * r.num_samples as f64 / total, &r.grad);
    }
    Ok(next)
}

/// Naive second-order baseline: theta - lr * mean of the clients' own
/// quasi-Newton directions.
pub fn newton_avg_aggregate(
    directions: &[ParamVector],
    theta: &ParamVector,
    lr: f64,
) -> Result<ParamVector, AggregateError> {
    if directions.is_empty() {
        return Err(AggregateError::EmptyInput);
    }
    let mut next = theta.clone();
    let w = 1.0 / directions.len() as f64;
    for d in directions {
        next.axpy(-lr * w, d);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn single_client_scaling() {
        let b = orthogonalize(&[pv(&[3.0, 4.0])], &[2.0]).unwrap();
        assert_eq!(b.vectors()[0].as_slice(), &[1.5, 2.0]);
        assert_eq!(b.denominators(), &[2.0]);
        assert!(b.dropped().is_empty());
    }

    #[test]
    fn orthogonal_inputs_skip_projections() {
        let b = orthogonalize(&[pv(&[1.0, 0.0]), pv(&[0.0, 2.0])], &[1.0, 4.0]).unwrap();
        assert_eq!(b.vectors()[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(b.vectors()[1].as_slice(), &[0.0, 0.5]);
        assert_eq!(b.denominators()[1], 4.0);
    }

    #[test]
    fn worked_two_client_chain() {
        let grads = [pv(&[1.0, 0.0]), pv(&[1.0, 1.0])];
        let b = orthogonalize(&grads, &[1.0, 3.0]).unwrap();
        assert_eq!(b.vectors()[0].as_slice(), &[1.0, 0.0]);
        assert_relative_eq!(b.vectors()[1][0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(b.vectors()[1][1], 0.5, max_relative = 1e-15);
        assert_relative_eq!(b.denominators()[1], 2.0, max_relative = 1e-15);

        let lambdas = optimal_weights(&b).unwrap();
        assert_relative_eq!(lambdas[0], 0.2, max_relative = 1e-14);
        assert_relative_eq!(lambdas[1], 0.8, max_relative = 1e-14);

        let plan = plan_step(&b, &lambdas).unwrap();
        assert_relative_eq!(plan.direction[0], 0.2, max_relative = 1e-14);
        assert_relative_eq!(plan.direction[1], 0.4, max_relative = 1e-14);
        assert_relative_eq!(plan.eta, 5.0, max_relative = 1e-14);
        // Proportionality identity: g_k . d = rate_k / sum_j 1/|b_j|^2.
        assert_relative_eq!(plan.per_client_rate[0], 0.2, max_relative = 1e-14);
        assert_relative_eq!(plan.per_client_rate[1], 0.6, max_relative = 1e-14);
        // eta |d|^2 = 1.
        assert_relative_eq!(plan.eta * plan.direction.norm_sq(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn single_client_plan_chain() {
        let b = orthogonalize(&[pv(&[3.0, 4.0])], &[2.0]).unwrap();
        let lambdas = optimal_weights(&b).unwrap();
        assert_eq!(lambdas, vec![1.0]);
        let plan = plan_step(&b, &lambdas).unwrap();
        assert_relative_eq!(plan.eta, 0.16, max_relative = 1e-14);
        assert_eq!(plan.direction.as_slice(), &[1.5, 2.0]);
        assert_relative_eq!(plan.per_client_rate[0], 12.5, max_relative = 1e-14);
        assert_relative_eq!(plan.per_client_rate[0], 2.0 / 0.16, max_relative = 1e-12);
    }

    #[test]
    fn optimal_weights_examples() {
        // Basis norms are |g|/rate; rates chosen so |b_1|^2 = 1, |b_2|^2 = 3.
        let b = orthogonalize(
            &[pv(&[1.0, 0.0]), pv(&[0.0, 3.0])],
            &[1.0, 3.0f64.sqrt()],
        )
        .unwrap();
        assert_relative_eq!(b.vectors()[0].norm_sq(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(b.vectors()[1].norm_sq(), 3.0, max_relative = 1e-12);
        let w = optimal_weights(&b).unwrap();
        assert_relative_eq!(w[0], 0.75, max_relative = 1e-12);
        assert_relative_eq!(w[1], 0.25, max_relative = 1e-12);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn orthonormal_basis_mean_direction() {
        let grads = [pv(&[1.0, 0.0, 0.0]), pv(&[0.0, 1.0, 0.0]), pv(&[0.0, 0.0, 1.0])];
        let b = orthogonalize(&grads, &[1.0, 1.0, 1.0]).unwrap();
        let w = optimal_weights(&b).unwrap();
        let plan = plan_step(&b, &w).unwrap();
        assert_relative_eq!(plan.eta, 3.0, max_relative = 1e-12);
        for i in 0..3 {
            assert_relative_eq!(plan.direction[i], 1.0 / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn apply_step_and_clip() {
        let b = orthogonalize(&[pv(&[1.0, 0.0]), pv(&[1.0, 1.0])], &[1.0, 3.0]).unwrap();
        let mut plan = plan_step(&b, &optimal_weights(&b).unwrap()).unwrap();
        let theta = ParamVector::zeros(2);
        let next = apply_global_step(&theta, &mut plan, None);
        assert_relative_eq!(next[0], -1.0, max_relative = 1e-12);
        assert_relative_eq!(next[1], -2.0, max_relative = 1e-12);
        assert_eq!(plan.eta_applied, plan.eta);
        let clipped = apply_global_step(&theta, &mut plan, Some(2.5));
        assert_relative_eq!(clipped[0], -0.5, max_relative = 1e-12);
        assert_relative_eq!(clipped[1], -1.0, max_relative = 1e-12);
        assert_eq!(plan.eta_applied, 2.5);
    }

    #[test]
    fn zero_direction_is_fixed_point() {
        let mut plan = AggregationPlan {
            lambdas: vec![1.0],
            direction: ParamVector::zeros(2),
            eta: 7.0,
            eta_applied: 7.0,
            per_client_rate: vec![0.0],
        };
        let theta = pv(&[1.0, -2.0]);
        assert_eq!(apply_global_step(&theta, &mut plan, None), theta);
    }

    #[test]
    fn dependent_gradient_is_dropped() {
        let b = orthogonalize(&[pv(&[1.0, 0.0]), pv(&[2.0, 0.0])], &[1.0, 5.0]).unwrap();
        assert_eq!(b.retained(), &[0]);
        assert_eq!(b.dropped(), &[1]);
    }

    #[test]
    fn absorbed_denominator_is_dropped() {
        // Client 1 residual (0,1) is fine but rate - coefficient = 0.
        let b = orthogonalize(&[pv(&[1.0, 0.0]), pv(&[2.0, 1.0])], &[1.0, 2.0]).unwrap();
        assert_eq!(b.retained(), &[0]);
        assert_eq!(b.dropped(), &[1]);
    }

    #[test]
    fn zero_gradient_is_dropped() {
        let b = orthogonalize(&[pv(&[0.0, 0.0]), pv(&[1.0, 1.0])], &[1.0, 1.0]).unwrap();
        assert_eq!(b.retained(), &[1]);
        assert_eq!(b.dropped(), &[0]);
        assert!(matches!(
            orthogonalize(&[pv(&[0.0, 0.0])], &[1.0]),
            Err(AggregateError::AllClientsDegenerate)
        ));
    }

    #[test]
    fn negative_denominator_retained_with_flag_and_identity() {
        let grads = [pv(&[1.0, 0.0]), pv(&[2.0, 1.0])];
        let rates = [1.0, 1.0]; // coefficient 2 exceeds rate 1
        let b = orthogonalize(&grads, &rates).unwrap();
        assert_eq!(b.retained(), &[0, 1]);
        assert_eq!(b.negative_denominators(), &[1]);
        assert_relative_eq!(b.denominators()[1], -1.0, max_relative = 1e-14);
        let plan = plan_step(&b, &optimal_weights(&b).unwrap()).unwrap();
        let s: f64 = b.vectors().iter().map(|v| 1.0 / v.norm_sq()).sum();
        for (i, rate) in b.retained_rates().iter().enumerate() {
            assert_relative_eq!(plan.per_client_rate[i], rate / s, max_relative = 1e-10);
        }
    }

    #[test]
    fn proportionality_identity_random_sweep() {
        let mut r = crate::rng::stream_rng(2024, &[]);
        for _ in 0..50 {
            let k = r.random_range(1..=6usize);
            let d = r.random_range(k..=16usize);
            let grads: Vec<ParamVector> = (0..k)
                .map(|_| ParamVector::new((0..d).map(|_| r.random_range(-1.0..1.0)).collect()))
                .collect();
            let rates: Vec<f64> = (0..k).map(|_| r.random_range(0.1..4.0)).collect();
            let b = orthogonalize(&grads, &rates).unwrap();
            let plan = plan_step(&b, &optimal_weights(&b).unwrap()).unwrap();
            let s: f64 = b.vectors().iter().map(|v| 1.0 / v.norm_sq()).sum();
            for (i, rate) in b.retained_rates().iter().enumerate() {
                let expect = rate / s;
                assert!(
                    (plan.per_client_rate[i] - expect).abs() <= 1e-8 * expect.abs(),
                    "identity violated: {} vs {expect}",
                    plan.per_client_rate[i]
                );
                assert!(plan.per_client_rate[i] > 0.0);
            }
            assert!(b.max_orthogonality() <= 1e-8);
            assert!(b.max_reconstruction_error() <= 1e-8);
            assert_relative_eq!(plan.eta * plan.direction.norm_sq(), 1.0, max_relative = 1e-10);
        }
    }

    #[test]
    fn rate_scaling_covariance() {
        // Rates scaled by c: basis vectors shrink by 1/c, weights hold,
        // eta grows by c^2, so the update eta*d scales by exactly c.
        let mut r = crate::rng::stream_rng(31, &[]);
        let grads: Vec<ParamVector> = (0..4)
            .map(|_| ParamVector::new((0..8).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect();
        let rates: Vec<f64> = (0..4).map(|_| r.random_range(0.2..3.0)).collect();
        let b0 = orthogonalize(&grads, &rates).unwrap();
        let w0 = optimal_weights(&b0).unwrap();
        let p0 = plan_step(&b0, &w0).unwrap();
        let base = p0.direction.scaled(p0.eta);
        for c in [1e-3, 1e3] {
            let scaled: Vec<f64> = rates.iter().map(|v| c * v).collect();
            let b = orthogonalize(&grads, &scaled).unwrap();
            let w = optimal_weights(&b).unwrap();
            let plan = plan_step(&b, &w).unwrap();
            for (wi, w0i) in w.iter().zip(&w0) {
                assert_relative_eq!(wi, w0i, max_relative = 1e-10);
            }
            assert_relative_eq!(plan.eta, c * c * p0.eta, max_relative = 1e-10);
            let update = plan.direction.scaled(plan.eta);
            for i in 0..8 {
                assert_relative_eq!(update[i], c * base[i], max_relative = 1e-8, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn loss_rescaling_leaves_update_invariant() {
        // Scaling every client loss by c multiplies gradients and rates
        // together; the basis, weights, direction, and step all cancel
        // the factor and the applied update is unchanged.
        let mut r = crate::rng::stream_rng(32, &[]);
        let grads: Vec<ParamVector> = (0..5)
            .map(|_| ParamVector::new((0..9).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect();
        let rates: Vec<f64> = (0..5).map(|_| r.random_range(0.2..3.0)).collect();
        let b0 = orthogonalize(&grads, &rates).unwrap();
        let p0 = plan_step(&b0, &optimal_weights(&b0).unwrap()).unwrap();
        let base = p0.direction.scaled(p0.eta);
        for c in [1e-3, 1e3] {
            let sg: Vec<ParamVector> = grads.iter().map(|g| g.scaled(c)).collect();
            let sr: Vec<f64> = rates.iter().map(|v| c * v).collect();
            let b = orthogonalize(&sg, &sr).unwrap();
            let plan = plan_step(&b, &optimal_weights(&b).unwrap()).unwrap();
            let update = plan.direction.scaled(plan.eta);
            for i in 0..9 {
                assert_relative_eq!(update[i], base[i], max_relative = 1e-8, epsilon = 1e-12);
            }
        }
    }

    fn report(id: usize, grad: &[f64], n: usize) -> ClientReport {
        ClientReport {
            client_id: id,
            grad: pv(grad),
            rate: 1.0,
            num_samples: n,
            loss_before: 0.0,
            loss_after: 0.0,
        }
    }

    #[test]
    fn fedavg_weighted_mean() {
        let theta = ParamVector::zeros(2);
        let single = fedavg_aggregate(&[report(0, &[1.0, 2.0], 5)], &theta, 0.5).unwrap();
        assert_eq!(single.as_slice(), &[-0.5, -1.0]);
        let two = fedavg_aggregate(
            &[report(0, &[1.0, 0.0], 1), report(1, &[0.0, 1.0], 3)],
            &theta,
            1.0,
        )
        .unwrap();
        assert_relative_eq!(two[0], -0.25, max_relative = 1e-15);
        assert_relative_eq!(two[1], -0.75, max_relative = 1e-15);
    }

    #[test]
    fn fedavg_opposite_gradients_cancel() {
        let theta = pv(&[0.3, -0.7]);
        let out = fedavg_aggregate(
            &[report(0, &[1.0, -2.0], 4), report(1, &[-1.0, 2.0], 4)],
            &theta,
            0.7,
        )
        .unwrap();
        for i in 0..2 {
            assert_relative_eq!(out[i], theta[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn newton_avg_matches_fedavg_under_identity_curvature() {
        let theta = pv(&[1.0, 1.0]);
        let g0 = pv(&[0.5, -0.5]);
        let g1 = pv(&[1.5, 0.5]);
        let na = newton_avg_aggregate(&[g0.clone(), g1.clone()], &theta, 0.2).unwrap();
        let fa = fedavg_aggregate(
            &[report(0, g0.as_slice(), 1), report(1, g1.as_slice(), 1)],
            &theta,
            0.2,
        )
        .unwrap();
        assert_eq!(na, fa);
        let single = newton_avg_aggregate(&[g0.clone()], &theta, 0.2).unwrap();
        assert_eq!(single, theta.sub(&g0.scaled(0.2)));
    }

    #[test]
    fn step_clip_from_round_pairs() {
        let p1 = CurvaturePair::accept(pv(&[1.0, 0.0]), pv(&[2.0, 0.0])).unwrap();
        let p2 = CurvaturePair::accept(pv(&[0.0, 2.0]), pv(&[0.0, 1.0])).unwrap();
        // l_hat = max(2, 0.5) = 2; min rate 0.6 -> clip = 0.6.
        let clip = step_clip(&[0.6, 1.4], [&p1, &p2]).unwrap();
        assert_relative_eq!(clip, 0.6, max_relative = 1e-14);
        assert_eq!(step_clip(&[1.0], std::iter::empty()), None);
    }
}
