//! Softmax cross-entropy heads: the fixed-prototype loss used by CoReS and the
//! learnable linear head used by the baselines.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::polytope::FixedClassifier;
use crate::seed;

/// Mean softmax cross-entropy over rows of `logits`, with the gradient with
/// respect to the logits. Uses a max-shifted log-sum-exp.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let k = logits.cols();
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidLabel {
                label: y,
                allocated: k,
            });
        }
        let z = logits.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(i);
        let mut sum = 0.0;
        for (gj, &zj) in g.iter_mut().zip(z) {
            let e = (zj - max).exp();
            *gj = e;
            sum += e;
        }
        total += sum.ln() + max - z[y];
        for gj in g.iter_mut() {
            *gj *= inv_n / sum;
        }
        g[y] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// CoReS loss: softmax over all `K` outputs of the fixed classifier, so the
/// unallocated ("future") outputs sit in the denominator and push features
/// away from their prototypes. Returns the mean loss and `dLoss/dFeatures`;
/// the prototypes receive no gradient.
pub fn cores_loss_and_grad(
    features: &Matrix,
    labels: &[usize],
    fc: &FixedClassifier,
) -> Result<(f64, Matrix)> {
    if features.cols() != fc.dim() {
        return Err(Error::invalid(format!(
            "features have dimension {}, classifier expects {}",
            features.cols(),
            fc.dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= fc.allocated()) {
        return Err(Error::InvalidLabel {
            label: bad,
            allocated: fc.allocated(),
        });
    }
    let w = fc.prototypes();
    let logits = features.matmul(w);
    let (loss, d_logits) = softmax_cross_entropy(&logits, labels)?;
    let d_features = d_logits.matmul_transposed(w);
    Ok((loss, d_features))
}

/// Trainable bias-free linear classifier for the baselines; `weights` is
/// `dim × classes`, one column per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Matrix,
}

impl LinearHead {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::invalid("linear head needs positive dim and class count"));
        }
        let mut head = LinearHead {
            weights: Matrix::zeros(dim, 0),
        };
        head.weights = head.grown_columns(dim, classes, seed);
        Ok(head)
    }

    fn grown_columns(&self, dim: usize, classes: usize, seed: u64) -> Matrix {
        let old = self.weights.cols();
        let bound = (6.0 / (dim + classes) as f64).sqrt();
        let mut rng = seed::rng(seed);
        let mut w = Matrix::zeros(dim, classes);
        for r in 0..dim {
            for c in 0..old {
                w.set(r, c, self.weights.get(r, c));
            }
        }
        for c in old..classes {
            for r in 0..dim {
                w.set(r, c, rng.random_range(-bound..bound));
            }
        }
        w
    }

    /// Keeps existing columns and appends freshly initialized ones.
    pub fn expanded(&self, classes: usize, seed: u64) -> Result<Self> {
        if classes < self.classes() {
            return Err(Error::invalid("cannot shrink a classifier head"));
        }
        Ok(LinearHead {
            weights: self.grown_columns(self.dim(), classes, seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    /// Returns `(loss, dLoss/dFeatures, dLoss/dWeights)`.
    pub fn loss_and_grad(&self, features: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, Matrix)> {
        if features.cols() != self.dim() {
            return Err(Error::invalid("feature dimension does not match the head"));
        }
        let logits = features.matmul(&self.weights);
        let (loss, d_logits) = softmax_cross_entropy(&logits, labels)?;
        let d_features = d_logits.matmul_transposed(&self.weights);
        let d_weights = features.transpose().matmul(&d_logits);
        Ok((loss, d_features, d_weights))
    }
}
