//! Fairness and progress metrics over per-client accuracy and loss
//! vectors: population spread, worst/best tail means, angle to the
//! all-ones vector, divergence from the uniform share, and the fraction
//! of clients a round did not hurt.

use std::error::Error;
use std::fmt;

/// A client counts as "not hurt" when its loss after the global step is
/// at most this much above its loss before, so floating-point no-ops
/// count as unchanged.
pub const RHO_ABS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    EmptyInput,
    LengthMismatch { left: usize, right: usize },
    /// Tail fraction outside (0, 1].
    InvalidFraction { value: f64 },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyInput => write!(f, "empty input"),
            MetricsError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            MetricsError::InvalidFraction { value } => {
                write!(f, "tail fraction {value} outside (0, 1]")
            }
        }
    }
}

impl Error for MetricsError {}

/// Summary of how evenly a quantity (accuracy, usually) is distributed
/// across clients.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FairnessReport {
    pub mean_acc: f64,
    /// Population standard deviation (divide by K, not K-1).
    pub std_acc: f64,
    /// Mean of the lowest ceil(k_fraction * K) entries.
    pub worst_k: f64,
    /// Mean of the highest ceil(k_fraction * K) entries.
    pub best_k: f64,
    pub k_fraction: f64,
    /// Angle in degrees between the vector and the all-ones direction;
    /// 0 for the zero vector by convention.
    pub angle_deg: f64,
    /// KL divergence in nats between the sum-normalized vector and the
    /// uniform distribution; 0 when everything is zero, see `all_zero`.
    pub kl_nats: f64,
    /// True when every entry is zero, where the divergence is undefined
    /// and reported as 0.
    pub all_zero: bool,
}

/// Computes the fairness summary of an accuracy vector. Entries may be
/// on the [0,1] or [0,100] scale; nothing here depends on which.
pub fn fairness_report(
    accuracies: &[f64],
    k_fraction: f64,
) -> Result<FairnessReport, MetricsError> {
    if accuracies.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(MetricsError::InvalidFraction { value: k_fraction });
    }
    let k = accuracies.len();
    let kf = k as f64;
    let mean = accuracies.iter().sum::<f64>() / kf;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / kf;
    let std = var.sqrt();

    let mut order: Vec<usize> = (0..k).collect();
    // Ties sort by client position; the tail means cannot depend on it.
    order.sort_by(|&i, &j| {
        accuracies[i]
            .partial_cmp(&accuracies[j])
            .expect("non-finite accuracy")
            .then(i.cmp(&j))
    });
    let m = ((k_fraction * kf).ceil() as usize).clamp(1, k);
    let tail_mean = |ids: &[usize]| ids.iter().map(|&i| accuracies[i]).sum::<f64>() / m as f64;
    let worst = tail_mean(&order[..m]);
    let best = tail_mean(&order[k - m..]);

    // Angle via atan2 of the component orthogonal to the mean direction;
    // identical to arccos(a.1 / (|a| sqrt(K))) but does not lose digits
    // when the vector is nearly uniform.
    let resid_norm = accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        .sqrt();
    let angle_deg = resid_norm.atan2(mean * kf.sqrt()).to_degrees();

    let total: f64 = accuracies.iter().sum();
    let all_zero = total == 0.0;
    let kl_nats = if all_zero {
        0.0
    } else {
        accuracies
            .iter()
            .map(|a| {
                let p = a / total;
                if p > 0.0 {
                    p * (p * kf).ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            .max(0.0)
    };

    Ok(FairnessReport {
        mean_acc: mean,
        std_acc: std,
        worst_k: worst,
        best_k: best,
        k_fraction,
        angle_deg,
        kl_nats,
        all_zero,
    })
}

/// Fraction of clients whose loss decreased or stayed put (within
/// [`RHO_ABS_TOL`]) across a global step. Participating clients only.
pub fn improved_fraction(
    losses_before: &[f64],
    losses_after: &[f64],
) -> Result<f64, MetricsError> {
    if losses_before.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if losses_before.len() != losses_after.len() {
        return Err(MetricsError::LengthMismatch {
            left: losses_before.len(),
            right: losses_after.len(),
        });
    }
    let ok = losses_before
        .iter()
        .zip(losses_after)
        .filter(|(b, a)| **a <= **b + RHO_ABS_TOL)
        .count();
    Ok(ok as f64 / losses_before.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn uniform_vector_is_perfectly_fair() {
        let r = fairness_report(&[80.0, 80.0, 80.0], 0.1).unwrap();
        assert_eq!(r.mean_acc, 80.0);
        assert_eq!(r.std_acc, 0.0);
        assert_eq!(r.angle_deg, 0.0);
        assert!(r.kl_nats.abs() <= 1e-12);
        assert!(!r.all_zero);
    }

    #[test]
    fn two_point_vector_tails_and_angle() {
        let r = fairness_report(&[1.0, 0.0], 0.5).unwrap();
        assert_eq!(r.worst_k, 0.0);
        assert_eq!(r.best_k, 1.0);
        assert_relative_eq!(r.angle_deg, 45.0, epsilon = 1e-9);
    }

    #[test]
    fn kl_of_skewed_pair() {
        let r = fairness_report(&[60.0, 20.0], 0.1).unwrap();
        assert!((r.kl_nats - 0.1308).abs() <= 1e-4);
        let exact = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert_relative_eq!(r.kl_nats, exact, epsilon = 1e-15);
    }

    #[test]
    fn full_fraction_collapses_tails_to_mean() {
        let a = [0.4, 0.9, 0.1, 0.6];
        let r = fairness_report(&a, 1.0).unwrap();
        assert_relative_eq!(r.worst_k, r.mean_acc, epsilon = 1e-15);
        assert_relative_eq!(r.best_k, r.mean_acc, epsilon = 1e-15);
    }

    #[test]
    fn tail_count_rounds_up() {
        // K=10, fraction 0.25 -> ceil(2.5) = 3 entries per tail.
        let a = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let r = fairness_report(&a, 0.25).unwrap();
        assert_relative_eq!(r.worst_k, 1.0, epsilon = 1e-15);
        assert_relative_eq!(r.best_k, 8.0, epsilon = 1e-15);
        let tiny = fairness_report(&[0.3, 0.7, 0.5], 0.01).unwrap();
        assert_eq!(tiny.worst_k, 0.3);
        assert_eq!(tiny.best_k, 0.7);
    }

    #[test]
    fn population_std_not_sample_std() {
        let r = fairness_report(&[0.0, 2.0], 0.5).unwrap();
        assert_eq!(r.mean_acc, 1.0);
        assert_eq!(r.std_acc, 1.0);
    }

    #[test]
    fn permutation_invariant() {
        let a = [0.12, 0.93, 0.47, 0.71, 0.05, 0.66];
        let b = [0.66, 0.05, 0.12, 0.71, 0.93, 0.47];
        let ra = fairness_report(&a, 0.34).unwrap();
        let rb = fairness_report(&b, 0.34).unwrap();
        assert_relative_eq!(ra.mean_acc, rb.mean_acc, max_relative = 1e-12);
        assert_relative_eq!(ra.std_acc, rb.std_acc, max_relative = 1e-12);
        assert_eq!(ra.worst_k, rb.worst_k);
        assert_eq!(ra.best_k, rb.best_k);
        assert_relative_eq!(ra.angle_deg, rb.angle_deg, max_relative = 1e-12);
        assert_relative_eq!(ra.kl_nats, rb.kl_nats, max_relative = 1e-12, epsilon = 1e-15);
    }

    #[test]
    fn all_zero_vector_flagged() {
        let r = fairness_report(&[0.0, 0.0], 0.5).unwrap();
        assert!(r.all_zero);
        assert_eq!(r.kl_nats, 0.0);
        assert_eq!(r.angle_deg, 0.0);
        assert_eq!(r.mean_acc, 0.0);
    }

    #[test]
    fn report_bounds_hold_on_random_vectors() {
        let mut rng = crate::rng::stream_rng(9, &[]);
        for _ in 0..200 {
            let k = rng.random_range(1..=12usize);
            let a: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..100.0)).collect();
            let r = fairness_report(&a, rng.random_range(0.05..1.0)).unwrap();
            assert!(r.worst_k <= r.mean_acc + 1e-12);
            assert!(r.mean_acc <= r.best_k + 1e-12);
            assert!(r.std_acc >= 0.0);
            assert!((0.0..=90.0).contains(&r.angle_deg));
            assert!(r.kl_nats >= 0.0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(fairness_report(&[], 0.1), Err(MetricsError::EmptyInput));
        assert_eq!(
            fairness_report(&[1.0], 0.0),
            Err(MetricsError::InvalidFraction { value: 0.0 })
        );
        assert_eq!(
            fairness_report(&[1.0], 1.5),
            Err(MetricsError::InvalidFraction { value: 1.5 })
        );
    }

    #[test]
    fn improved_fraction_examples() {
        assert_eq!(improved_fraction(&[1.0, 1.0], &[0.9, 1.1]).unwrap(), 0.5);
        let same = [0.3, 0.4, 0.5];
        assert_eq!(improved_fraction(&same, &same).unwrap(), 1.0);
        assert_eq!(improved_fraction(&[1.0, 1.0], &[0.5, 0.1]).unwrap(), 1.0);
        // Rounding-level increases count as unchanged.
        assert_eq!(improved_fraction(&[1.0], &[1.0 + 1e-13]).unwrap(), 1.0);
        assert_eq!(improved_fraction(&[1.0], &[1.0 + 1e-9]).unwrap(), 0.0);
    }

    #[test]
    fn improved_fraction_rejects_bad_lengths() {
        assert_eq!(improved_fraction(&[], &[]), Err(MetricsError::EmptyInput));
        assert_eq!(
            improved_fraction(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch { left: 1, right: 2 })
        );
    }
}
