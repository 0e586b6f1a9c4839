//! Dense vector and small symmetric-matrix algebra shared by every module.
//!
//! All arithmetic is plain f64; tolerances elsewhere in the crate assume
//! no extended precision is used anywhere.

use std::error::Error;
use std::fmt;

/// Denominators below this are treated as rank deficiency, not divided by.
pub const ZERO_NORM_SQ: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq)]
pub enum VecOpsError {
    /// Projection target has squared norm below [`ZERO_NORM_SQ`].
    ZeroVector,
    DimensionMismatch { expected: usize, got: usize },
    /// Length of a coefficient slice does not match the vector count.
    LengthMismatch { coeffs: usize, vectors: usize },
    NotPositiveDefinite,
}

impl fmt::Display for VecOpsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VecOpsError::ZeroVector => write!(f, "projection onto a zero vector"),
            VecOpsError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            VecOpsError::LengthMismatch { coeffs, vectors } => {
                write!(f, "{coeffs} coefficients for {vectors} vectors")
            }
            VecOpsError::NotPositiveDefinite => {
                write!(f, "matrix is not positive definite")
            }
        }
    }
}

impl Error for VecOpsError {}

/// Flat parameter vector in R^d. All vectors exchanged within one
/// federation run share the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn zeros(d: usize) -> Self {
        ParamVector { values: vec![0.0; d] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot on mismatched lengths");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector::new(self.values.iter().map(|v| c * v).collect())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "add on mismatched lengths");
        ParamVector::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "sub on mismatched lengths");
        ParamVector::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// self += c * other, in place.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "axpy on mismatched lengths");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Projection of `v` onto the line spanned by `u`: (v.u / u.u) u.
///
/// Refuses near-zero targets so that callers detect rank deficiency
/// instead of dividing by noise.
pub fn project(v: &ParamVector, u: &ParamVector) -> Result<ParamVector, VecOpsError> {
    if v.len() != u.len() {
        return Err(VecOpsError::DimensionMismatch {
            expected: v.len(),
            got: u.len(),
        });
    }
    let uu = u.norm_sq();
    if uu < ZERO_NORM_SQ {
        return Err(VecOpsError::ZeroVector);
    }
    Ok(u.scaled(v.dot(u) / uu))
}

/// Linear combination sum_i coeffs[i] * vectors[i].
pub fn lincomb(coeffs: &[f64], vectors: &[ParamVector]) -> Result<ParamVector, VecOpsError> {
    if coeffs.len() != vectors.len() {
        return Err(VecOpsError::LengthMismatch {
            coeffs: coeffs.len(),
            vectors: vectors.len(),
        });
    }
    let d = vectors.first().map_or(0, |v| v.len());
    let mut out = ParamVector::zeros(d);
    for (c, v) in coeffs.iter().zip(vectors) {
        if v.len() != d {
            return Err(VecOpsError::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
        out.axpy(*c, v);
    }
    Ok(out)
}

/// Dense symmetric matrix of small order, row-major storage.
/// Used for curvature approximations; order is capped by config
/// validation well below anything that needs blocked kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSymMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl DenseSymMatrix {
    pub fn identity(order: usize) -> Self {
        let mut entries = vec![0.0; order * order];
        for i in 0..order {
            entries[i * order + i] = 1.0;
        }
        DenseSymMatrix { order, entries }
    }

    pub fn from_rows(order: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), order * order, "bad entry count");
        DenseSymMatrix { order, entries }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.order + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.order + j] = v;
    }

    /// Largest relative asymmetry |A[i][j] - A[j][i]| / max(1, |A[i][j]|).
    pub fn symmetry_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.order {
            for j in (i + 1)..self.order {
                let a = self.get(i, j);
                let b = self.get(j, i);
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
        }
        worst
    }

    pub fn matvec(&self, v: &ParamVector) -> ParamVector {
        assert_eq!(v.len(), self.order, "matvec on mismatched lengths");
        let x = v.as_slice();
        let mut out = vec![0.0; self.order];
        for i in 0..self.order {
            let row = &self.entries[i * self.order..(i + 1) * self.order];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        ParamVector::new(out)
    }

    /// Solves A x = b for symmetric positive definite A via Cholesky.
    pub fn solve_spd(&self, b: &ParamVector) -> Result<ParamVector, VecOpsError> {
        if b.len() != self.order {
            return Err(VecOpsError::DimensionMismatch {
                expected: self.order,
                got: b.len(),
            });
        }
        let n = self.order;
        // Lower-triangular factor L with A = L L^T.
        let mut l = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.get(i, j);
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(VecOpsError::NotPositiveDefinite);
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        // Forward then backward substitution.
        let mut y = b.as_slice().to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= l[i * n + k] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= l[k * n + i] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        Ok(ParamVector::new(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn project_axis() {
        let r = project(&pv(&[1.0, 1.0]), &pv(&[1.0, 0.0])).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn project_orthogonal_inputs() {
        let r = project(&pv(&[0.0, 1.0]), &pv(&[1.0, 0.0])).unwrap();
        assert_eq!(r.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn project_diagonal() {
        let r = project(&pv(&[3.0, 4.0]), &pv(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(r[0], 3.5, max_relative = 1e-15);
        assert_relative_eq!(r[1], 3.5, max_relative = 1e-15);
    }

    #[test]
    fn project_zero_target_rejected() {
        let r = project(&pv(&[1.0, 2.0]), &pv(&[0.0, 1e-13]));
        assert_eq!(r, Err(VecOpsError::ZeroVector));
    }

    #[test]
    fn project_residual_orthogonal_to_target() {
        let v = pv(&[0.3, -1.7, 2.4]);
        let u = pv(&[1.1, 0.4, -0.2]);
        let p = project(&v, &u).unwrap();
        let resid = v.sub(&p);
        assert!(resid.dot(&u).abs() <= 1e-12 * v.norm() * u.norm());
        let back = p.add(&resid);
        for i in 0..3 {
            assert_relative_eq!(back[i], v[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn lincomb_identity_and_symmetry() {
        let r = lincomb(&[1.0], &[pv(&[2.0, 3.0])]).unwrap();
        assert_eq!(r.as_slice(), &[2.0, 3.0]);
        let r = lincomb(&[0.5, 0.5], &[pv(&[1.0, 0.0]), pv(&[0.0, 1.0])]).unwrap();
        assert_eq!(r.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn lincomb_weighted() {
        let r = lincomb(&[0.2, 0.8], &[pv(&[1.0, 0.0]), pv(&[0.0, 0.5])]).unwrap();
        assert_relative_eq!(r[0], 0.2, max_relative = 1e-15);
        assert_relative_eq!(r[1], 0.4, max_relative = 1e-15);
    }

    #[test]
    fn lincomb_is_linear_in_coeffs() {
        let vs = [pv(&[1.0, 2.0, 3.0]), pv(&[-0.5, 0.25, 4.0])];
        let a = [0.3, -1.2];
        let b = [0.7, 2.2];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let lhs = lincomb(&ab, &vs).unwrap();
        let rhs = lincomb(&a, &vs).unwrap().add(&lincomb(&b, &vs).unwrap());
        for i in 0..3 {
            assert_relative_eq!(lhs[i], rhs[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn lincomb_length_mismatch() {
        let r = lincomb(&[1.0, 2.0], &[pv(&[1.0])]);
        assert!(matches!(r, Err(VecOpsError::LengthMismatch { .. })));
        let r = lincomb(&[1.0, 2.0], &[pv(&[1.0]), pv(&[1.0, 2.0])]);
        assert!(matches!(r, Err(VecOpsError::DimensionMismatch { .. })));
    }

    #[test]
    fn solve_spd_roundtrip() {
        let mut a = DenseSymMatrix::identity(3);
        a.set(0, 0, 4.0);
        a.set(1, 1, 3.0);
        a.set(2, 2, 2.0);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        let x = pv(&[1.0, -2.0, 0.5]);
        let b = a.matvec(&x);
        let x2 = a.solve_spd(&b).unwrap();
        for i in 0..3 {
            assert_relative_eq!(x2[i], x[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let mut a = DenseSymMatrix::identity(2);
        a.set(1, 1, -1.0);
        assert_eq!(
            a.solve_spd(&pv(&[1.0, 1.0])),
            Err(VecOpsError::NotPositiveDefinite)
        );
    }

    #[test]
    fn symmetry_error_detects_asymmetry() {
        let mut a = DenseSymMatrix::identity(2);
        assert_eq!(a.symmetry_error(), 0.0);
        a.set(0, 1, 1.0);
        assert!(a.symmetry_error() > 0.5);
    }
}
