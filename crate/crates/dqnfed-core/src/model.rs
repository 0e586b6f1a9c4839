//! Differentiable classifiers over flat parameter vectors: multinomial
//! logistic regression and a one-hidden-layer tanh MLP. Loss is mean
//! cross-entropy plus an l2 term over all parameters, so with l2_reg > 0
//! the linear model is strongly convex.

use std::error::Error;
use std::fmt;

use rand::Rng;

use crate::rng;
use crate::vecops::ParamVector;

/// Per-coordinate init scale; biases start at zero.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    DimensionMismatch { expected: usize, got: usize },
    EmptyBatch,
    LabelOutOfRange { index: usize, label: usize, num_classes: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            ModelError::EmptyBatch => write!(f, "empty batch"),
            ModelError::LabelOutOfRange {
                index,
                label,
                num_classes,
            } => write!(
                f,
                "label {label} at sample {index} outside [0, {num_classes})"
            ),
        }
    }
}

impl Error for ModelError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearSoftmax,
    Mlp1h,
}

/// Architecture and regularization of a model; the flat parameter count
/// is a deterministic function of this.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Hidden width; ignored by the linear model.
    pub hidden_dim: usize,
    pub l2_reg: f64,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize, l2_reg: f64) -> Self {
        ModelSpec {
            kind: ModelKind::LinearSoftmax,
            input_dim,
            num_classes,
            hidden_dim: 0,
            l2_reg,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, l2_reg: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp1h,
            input_dim,
            num_classes,
            hidden_dim,
            l2_reg,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::LinearSoftmax => self.input_dim * self.num_classes + self.num_classes,
            ModelKind::Mlp1h => {
                self.input_dim * self.hidden_dim
                    + self.hidden_dim
                    + self.hidden_dim * self.num_classes
                    + self.num_classes
            }
        }
    }
}

/// A labeled sample batch with row-major flat feature storage.
#[derive(Debug, Clone)]
pub struct Batch {
    features: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if features.len() != labels.len() * input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: labels.len() * input_dim,
                got: features.len(),
            });
        }
        Ok(Batch {
            features,
            input_dim,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: &[usize]) -> Result<Self, ModelError> {
        if rows.len() != labels.len() {
            return Err(ModelError::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        let input_dim = rows.first().map_or(0, |r| r.len());
        let mut features = Vec::with_capacity(rows.len() * input_dim);
        for r in rows {
            if r.len() != input_dim {
                return Err(ModelError::DimensionMismatch {
                    expected: input_dim,
                    got: r.len(),
                });
            }
            features.extend_from_slice(r);
        }
        Batch::new(features, input_dim, labels.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Deterministic initialization: weights uniform in [-0.05, 0.05] in
/// layout order, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut r = rng::stream_rng(seed, &[]);
    let mut draw = |n: usize, out: &mut Vec<f64>| {
        for _ in 0..n {
            out.push(r.random_range(-INIT_SCALE..INIT_SCALE));
        }
    };
    let mut v = Vec::with_capacity(spec.param_count());
    match spec.kind {
        ModelKind::LinearSoftmax => {
            draw(spec.input_dim * spec.num_classes, &mut v);
            v.extend(std::iter::repeat(0.0).take(spec.num_classes));
        }
        ModelKind::Mlp1h => {
            draw(spec.input_dim * spec.hidden_dim, &mut v);
            v.extend(std::iter::repeat(0.0).take(spec.hidden_dim));
            draw(spec.hidden_dim * spec.num_classes, &mut v);
            v.extend(std::iter::repeat(0.0).take(spec.num_classes));
        }
    }
    ParamVector::new(v)
}

fn check_shapes(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<(), ModelError> {
    if params.len() != spec.param_count() {
        return Err(ModelError::DimensionMismatch {
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    if batch.input_dim() != spec.input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: spec.input_dim,
            got: batch.input_dim(),
        });
    }
    for i in 0..batch.len() {
        if batch.label(i) >= spec.num_classes {
            return Err(ModelError::LabelOutOfRange {
                index: i,
                label: batch.label(i),
                num_classes: spec.num_classes,
            });
        }
    }
    Ok(())
}

// Shifted softmax probabilities of one logit row, in place.
fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

fn linear_logits(spec: &ModelSpec, p: &[f64], x: &[f64], logits: &mut [f64]) {
    let d = spec.input_dim;
    let c_count = spec.num_classes;
    let bias_off = d * c_count;
    for c in 0..c_count {
        let row = &p[c * d..(c + 1) * d];
        logits[c] = p[bias_off + c] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
    }
}

fn mlp_forward(
    spec: &ModelSpec,
    p: &[f64],
    x: &[f64],
    hidden: &mut [f64],
    logits: &mut [f64],
) {
    let d = spec.input_dim;
    let h_count = spec.hidden_dim;
    let c_count = spec.num_classes;
    let b1_off = d * h_count;
    let w2_off = b1_off + h_count;
    let b2_off = w2_off + h_count * c_count;
    for h in 0..h_count {
        let row = &p[h * d..(h + 1) * d];
        let pre = p[b1_off + h] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        hidden[h] = pre.tanh();
    }
    for c in 0..c_count {
        let row = &p[w2_off + c * h_count..w2_off + (c + 1) * h_count];
        logits[c] = p[b2_off + c] + row.iter().zip(hidden.iter()).map(|(w, hi)| w * hi).sum::<f64>();
    }
}

/// Mean cross-entropy over the batch plus (l2_reg / 2) |params|^2, with
/// its exact analytic gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector), ModelError> {
    check_shapes(spec, params, batch)?;
    let p = params.as_slice();
    let n = batch.len() as f64;
    let c_count = spec.num_classes;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut logits = vec![0.0; c_count];

    match spec.kind {
        ModelKind::LinearSoftmax => {
            let d = spec.input_dim;
            let bias_off = d * c_count;
            for i in 0..batch.len() {
                let x = batch.feature_row(i);
                let label = batch.label(i);
                linear_logits(spec, p, x, &mut logits);
                softmax_in_place(&mut logits);
                loss += -logits[label].max(f64::MIN_POSITIVE).ln() / n;
                for c in 0..c_count {
                    let delta = (logits[c] - if c == label { 1.0 } else { 0.0 }) / n;
                    let row = &mut grad[c * d..(c + 1) * d];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += delta * xi;
                    }
                    grad[bias_off + c] += delta;
                }
            }
        }
        ModelKind::Mlp1h => {
            let d = spec.input_dim;
            let h_count = spec.hidden_dim;
            let b1_off = d * h_count;
            let w2_off = b1_off + h_count;
            let b2_off = w2_off + h_count * c_count;
            let mut hidden = vec![0.0; h_count];
            let mut dhidden = vec![0.0; h_count];
            for i in 0..batch.len() {
                let x = batch.feature_row(i);
                let label = batch.label(i);
                mlp_forward(spec, p, x, &mut hidden, &mut logits);
                softmax_in_place(&mut logits);
                loss += -logits[label].max(f64::MIN_POSITIVE).ln() / n;
                dhidden.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..c_count {
                    let delta = (logits[c] - if c == label { 1.0 } else { 0.0 }) / n;
                    let w2_row = &p[w2_off + c * h_count..w2_off + (c + 1) * h_count];
                    let g2_row = &mut grad[w2_off + c * h_count..w2_off + (c + 1) * h_count];
                    for h in 0..h_count {
                        g2_row[h] += delta * hidden[h];
                        dhidden[h] += delta * w2_row[h];
                    }
                    grad[b2_off + c] += delta;
                }
                for h in 0..h_count {
                    // d tanh(u)/du = 1 - tanh(u)^2
                    let dpre = dhidden[h] * (1.0 - hidden[h] * hidden[h]);
                    let g1_row = &mut grad[h * d..(h + 1) * d];
                    for (g, xi) in g1_row.iter_mut().zip(x) {
                        *g += dpre * xi;
                    }
                    grad[b1_off + h] += dpre;
                }
            }
        }
    }

    if spec.l2_reg != 0.0 {
        loss += 0.5 * spec.l2_reg * params.norm_sq();
        for (g, w) in grad.iter_mut().zip(p) {
            *g += spec.l2_reg * w;
        }
    }
    Ok((loss, ParamVector::new(grad)))
}

/// Fraction of samples whose argmax logit matches the label; argmax ties
/// resolve to the lowest class index.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64, ModelError> {
    check_shapes(spec, params, batch)?;
    let p = params.as_slice();
    let mut logits = vec![0.0; spec.num_classes];
    let mut hidden = vec![0.0; spec.hidden_dim];
    let mut correct = 0usize;
    for i in 0..batch.len() {
        let x = batch.feature_row(i);
        match spec.kind {
            ModelKind::LinearSoftmax => linear_logits(spec, p, x, &mut logits),
            ModelKind::Mlp1h => mlp_forward(spec, p, x, &mut hidden, &mut logits),
        }
        let mut best = 0;
        for c in 1..spec.num_classes {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        if best == batch.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_grad;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn toy_batch() -> Batch {
        Batch::from_rows(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            &[0, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn param_counting() {
        assert_eq!(ModelSpec::linear(4, 3, 0.0).param_count(), 15);
        assert_eq!(ModelSpec::mlp(4, 5, 3, 0.0).param_count(), 43);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::mlp(4, 5, 3, 1e-3);
        let a = init_params(&spec, 77);
        let b = init_params(&spec, 77);
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 78));
        assert_eq!(a.len(), 43);
        assert!(a.as_slice().iter().all(|v| v.abs() <= INIT_SCALE));
        // Biases start at zero: hidden biases then output biases.
        assert!(a.as_slice()[20..25].iter().all(|v| *v == 0.0));
        assert!(a.as_slice()[40..43].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_params_give_log_c_loss() {
        for spec in [ModelSpec::linear(2, 3, 0.0), ModelSpec::mlp(2, 4, 3, 0.0)] {
            let params = ParamVector::zeros(spec.param_count());
            let (loss, _) = loss_and_grad(&spec, &params, &toy_batch()).unwrap();
            assert_relative_eq!(loss, (3.0f64).ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn bias_gradient_at_zero_params() {
        // One sample, two classes, label 0: softmax is (0.5, 0.5) so the
        // bias gradient is p - onehot = (-0.5, +0.5).
        let spec = ModelSpec::linear(2, 2, 0.0);
        let params = ParamVector::zeros(spec.param_count());
        let batch = Batch::from_rows(&[vec![0.3, -1.2]], &[0]).unwrap();
        let (_, grad) = loss_and_grad(&spec, &params, &batch).unwrap();
        assert_relative_eq!(grad[4], -0.5, max_relative = 1e-12);
        assert_relative_eq!(grad[5], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut r = crate::rng::stream_rng(404, &[]);
        for spec in [ModelSpec::linear(3, 4, 1e-3), ModelSpec::mlp(3, 4, 3, 1e-3)] {
            let params = ParamVector::new(
                (0..spec.param_count())
                    .map(|_| r.random_range(-0.8..0.8))
                    .collect(),
            );
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..3).map(|_| r.random_range(-1.5..1.5)).collect())
                .collect();
            let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..spec.num_classes)).collect();
            let batch = Batch::from_rows(&rows, &labels).unwrap();
            let (_, grad) = loss_and_grad(&spec, &params, &batch).unwrap();
            let fd = finite_diff_grad(
                |t| loss_and_grad(&spec, t, &batch).unwrap().0,
                &params,
                1e-5,
            )
            .unwrap();
            let scale = grad.norm().max(1.0);
            for i in 0..grad.len() {
                assert!(
                    (grad[i] - fd[i]).abs() <= 1e-5 * scale,
                    "{:?} coord {i}: {} vs {}",
                    spec.kind,
                    grad[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn accuracy_tie_breaks_to_lowest_class() {
        let spec = ModelSpec::linear(2, 2, 0.0);
        let params = ParamVector::zeros(spec.param_count());
        let batch = Batch::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]], &[0, 0]).unwrap();
        assert_eq!(accuracy(&spec, &params, &batch).unwrap(), 1.0);
        let batch1 = Batch::from_rows(&[vec![1.0, 2.0]], &[1]).unwrap();
        assert_eq!(accuracy(&spec, &params, &batch1).unwrap(), 0.0);
    }

    #[test]
    fn fits_linearly_separable_pair() {
        let spec = ModelSpec::linear(1, 2, 0.0);
        // Weights put class 0 on negative x, class 1 on positive x.
        let params = ParamVector::new(vec![-1.0, 1.0, 0.0, 0.0]);
        let batch = Batch::from_rows(&[vec![-2.0], vec![3.0]], &[0, 1]).unwrap();
        assert_eq!(accuracy(&spec, &params, &batch).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_counts_match_brute_force() {
        let spec = ModelSpec::linear(2, 3, 0.0);
        let params = init_params(&spec, 12);
        let mut r = crate::rng::stream_rng(13, &[]);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)])
            .collect();
        let labels: Vec<usize> = (0..40).map(|_| r.random_range(0..3)).collect();
        let batch = Batch::from_rows(&rows, &labels).unwrap();
        let acc = accuracy(&spec, &params, &batch).unwrap();
        let mut correct = 0;
        for i in 0..batch.len() {
            let x = batch.feature_row(i);
            let mut logits = vec![0.0; 3];
            linear_logits(&spec, params.as_slice(), x, &mut logits);
            let mut best = 0;
            for c in 1..3 {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / 40.0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let spec = ModelSpec::linear(2, 2, 0.0);
        let short = ParamVector::zeros(3);
        assert!(matches!(
            loss_and_grad(&spec, &short, &toy_batch()),
            Err(ModelError::DimensionMismatch { .. })
        ));
        let params = ParamVector::zeros(spec.param_count());
        let bad = Batch::from_rows(&[vec![0.0, 0.0]], &[5]).unwrap();
        assert!(matches!(
            accuracy(&spec, &params, &bad),
            Err(ModelError::LabelOutOfRange { .. })
        ));
        assert!(matches!(Batch::from_rows(&[], &[]), Err(ModelError::EmptyBatch)));
    }
}
