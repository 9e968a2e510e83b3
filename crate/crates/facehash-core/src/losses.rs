//! The four training objectives and their exact gradients.
//!
//! - similarity pairing: soft-target cross-entropy between each row of the
//!   batch similarity matrix `S_i = [g_i . g~_1, ..., g_i . g~_N]` and the
//!   l1-normalized label-agreement row `Y_i`. The diagonal term is the
//!   self-similarity of an image with its own transform; off-diagonal
//!   positives are other images of the same identity. No temperature is
//!   applied to `S_i`.
//! - embedding norm penalty: mean of squared entries over all rows supplied.
//! - squared quantization: mean of |1 - q^2| on the pre-activation, with the
//!   subgradient at |q| = 1 taken as 0.
//! - classification: mean softmax cross-entropy of the identity logits.
//!
//! Combined objective: `sp + lambda1 * reg + lambda2 * sq + cls`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datapipe::IdentityLabel;
use crate::error::{Error, Result};

/// Weights balancing the norm and quantization terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.0002,
            lambda2: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidArgument(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - log_sum).collect()
}

/// Similarity pairing loss over one batch of projections and their
/// transformed twins. Returns the scalar and the gradients with respect to
/// both projection matrices.
pub fn sp_loss(
    g: ArrayView2<f64>,
    g_tilde: ArrayView2<f64>,
    labels: &[IdentityLabel],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = g.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch in sp_loss".into()));
    }
    if g_tilde.nrows() != n || g_tilde.ncols() != g.ncols() || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "sp_loss: g {:?}, g_tilde {:?}, {} labels",
            g.dim(),
            g_tilde.dim(),
            labels.len()
        )));
    }

    // S = G . G~^T  (n x n)
    let s = crate::netcore::ops_par_matmul(g, g_tilde.t());

    let mut loss = 0.0;
    let mut d_s = Array2::zeros((n, n));
    for i in 0..n {
        let row: Vec<f64> = s.row(i).to_vec();
        let log_p = log_softmax_row(&row);

        // Y_i: label agreement, l1-normalized; the self term makes it nonzero
        let agree: Vec<f64> = (0..n)
            .map(|j| if labels[i] == labels[j] { 1.0 } else { 0.0 })
            .collect();
        let norm: f64 = agree.iter().sum();
        debug_assert!(norm >= 1.0);

        for j in 0..n {
            let y = agree[j] / norm;
            loss -= y * log_p[j];
            // d/dS_ij of -sum_j y_j log softmax(S_i)_j = softmax_j - y_j
            d_s[(i, j)] = (log_p[j].exp() - y) / n as f64;
        }
    }
    loss /= n as f64;

    let grad_g = crate::netcore::ops_par_matmul(d_s.view(), g_tilde);
    let grad_g_tilde = crate::netcore::ops_par_matmul(d_s.t(), g);
    Ok((loss, grad_g, grad_g_tilde))
}

/// Mean squared entry of the stacked projection matrix; gradient is
/// `2 g / (rows * dims)`.
pub fn reg_loss(g_all: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let count = (g_all.nrows() * g_all.ncols()) as f64;
    let loss = g_all.iter().map(|v| v * v).sum::<f64>() / count;
    let grad = g_all.mapv(|v| 2.0 * v / count);
    (loss, grad)
}

/// Mean of |1 - q^2| over all entries of the pre-activation matrix.
pub fn squared_quantization_loss(q: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let count = (q.nrows() * q.ncols()) as f64;
    let loss = q.iter().map(|v| (1.0 - v * v).abs()).sum::<f64>() / count;
    // d/dq |1 - q^2| = -2q * sign(1 - q^2); 0 at the kink |q| = 1
    let grad = q.mapv(|v| {
        let u = 1.0 - v * v;
        if u == 0.0 {
            0.0
        } else {
            -2.0 * v * u.signum() / count
        }
    });
    (loss, grad)
}

/// The two quantization penalties this objective is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AltQuantKind {
    /// (1 - q^2)^2: convex near +-1, slow to pin codes down.
    DoubleSquared,
    /// |1 - |q||: small error values, weak pull.
    DoubleAbsolute,
}

/// Mean alternative quantization penalty (value only; used for comparison
/// plots, never trained against).
pub fn alt_quantization_loss(q: ArrayView2<f64>, kind: AltQuantKind) -> f64 {
    let count = (q.nrows() * q.ncols()) as f64;
    let sum: f64 = q
        .iter()
        .map(|&v| match kind {
            AltQuantKind::DoubleSquared => (1.0 - v * v).powi(2),
            AltQuantKind::DoubleAbsolute => (1.0 - v.abs()).abs(),
        })
        .sum();
    sum / count
}

/// Mean softmax cross-entropy of the identity logits.
pub fn classification_loss(
    logits: ArrayView2<f64>,
    labels: &[IdentityLabel],
) -> Result<(f64, Array2<f64>)> {
    let rows = logits.nrows();
    let c = logits.ncols();
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch in classification_loss".into()));
    }
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{rows} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, c));
    for i in 0..rows {
        let target = labels[i].index();
        if target >= c {
            return Err(Error::ShapeMismatch(format!(
                "label {target} out of range for {c} classes"
            )));
        }
        let row: Vec<f64> = logits.row(i).to_vec();
        let log_p = log_softmax_row(&row);
        loss -= log_p[target];
        for j in 0..c {
            let y = if j == target { 1.0 } else { 0.0 };
            grad[(i, j)] = (log_p[j].exp() - y) / rows as f64;
        }
    }
    Ok((loss / rows as f64, grad))
}

/// Combined objective value.
pub fn total_loss(sp: f64, reg: f64, sq: f64, cls: f64, weights: &LossWeights) -> f64 {
    sp + weights.lambda1 * reg + weights.lambda2 * sq + cls
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const TOL: f64 = 1e-9;

    fn labels(idx: &[u32]) -> Vec<IdentityLabel> {
        idx.iter().map(|&i| IdentityLabel(i)).collect()
    }

    #[test]
    fn sp_single_sample_identical_twin_is_zero() {
        let g = array![[0.7, -0.3]];
        let (loss, _, _) = sp_loss(g.view(), g.view(), &labels(&[0])).unwrap();
        assert!(loss.abs() < TOL, "single-logit softmax is 1: {loss}");
    }

    #[test]
    fn sp_two_distinct_identities_frozen_value() {
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        let (loss, _, _) = sp_loss(g.view(), g.view(), &labels(&[0, 1])).unwrap();
        let expected = (1.0 + (-1.0_f64).exp()).ln(); // 0.31326...
        assert!((loss - expected).abs() < 1e-6, "got {loss}, want {expected}");
        assert!((loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn sp_same_identity_entropy_floor() {
        // both samples share one identity; all pairwise dots are 1
        let g = array![[1.0, 0.0], [1.0, 0.0]];
        let gt = array![[1.0, 0.0], [1.0, 0.0]];
        let (loss, _, _) = sp_loss(g.view(), gt.view(), &labels(&[0, 0])).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((loss - ln2).abs() < 1e-6, "got {loss}, want ln 2 = {ln2}");
    }

    #[test]
    fn sp_is_invariant_under_batch_permutation() {
        let g = array![[0.3, 0.4], [-0.2, 0.9], [1.1, -0.5]];
        let gt = array![[0.1, 0.2], [0.5, -0.3], [-0.7, 0.8]];
        let (a, _, _) = sp_loss(g.view(), gt.view(), &labels(&[0, 1, 0])).unwrap();
        // permute rows (2, 0, 1) consistently in g, g~, labels
        let gp = array![[1.1, -0.5], [0.3, 0.4], [-0.2, 0.9]];
        let gtp = array![[-0.7, 0.8], [0.1, 0.2], [0.5, -0.3]];
        let (b, _, _) = sp_loss(gp.view(), gtp.view(), &labels(&[0, 0, 1])).unwrap();
        assert!((a - b).abs() < TOL);
    }

    #[test]
    fn reg_values() {
        let zero = Array2::zeros((3, 4));
        assert_eq!(reg_loss(zero.view()).0, 0.0);
        let ones = array![[1.0, 1.0, 1.0, 1.0]];
        assert!((reg_loss(ones.view()).0 - 1.0).abs() < TOL);
        let row = array![[3.0, 4.0]];
        assert!((reg_loss(row.view()).0 - 12.5).abs() < TOL);
    }

    #[test]
    fn quantization_values() {
        let exact = array![[1.0, -1.0]];
        assert_eq!(squared_quantization_loss(exact.view()).0, 0.0);
        let zeros = array![[0.0, 0.0]];
        assert_eq!(squared_quantization_loss(zeros.view()).0, 1.0);
        let mixed = array![[0.5, 2.0]];
        let (loss, _) = squared_quantization_loss(mixed.view());
        assert!((loss - 1.875).abs() < TOL, "(0.75 + 3.0)/2, got {loss}");
        // subgradient at the kink is zero
        let (_, grad) = squared_quantization_loss(exact.view());
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alt_quantization_values() {
        let pm1 = array![[1.0, -1.0]];
        assert_eq!(alt_quantization_loss(pm1.view(), AltQuantKind::DoubleSquared), 0.0);
        assert_eq!(alt_quantization_loss(pm1.view(), AltQuantKind::DoubleAbsolute), 0.0);
        let half = array![[0.5]];
        assert!((alt_quantization_loss(half.view(), AltQuantKind::DoubleSquared) - 0.5625).abs() < TOL);
        assert!((alt_quantization_loss(half.view(), AltQuantKind::DoubleAbsolute) - 0.5).abs() < TOL);
        assert!((squared_quantization_loss(half.view()).0 - 0.75).abs() < TOL);
        let zero = array![[0.0]];
        assert_eq!(alt_quantization_loss(zero.view(), AltQuantKind::DoubleSquared), 1.0);
        assert_eq!(alt_quantization_loss(zero.view(), AltQuantKind::DoubleAbsolute), 1.0);
    }

    #[test]
    fn classification_values() {
        // single class: loss is always zero
        let one = array![[3.7], [-2.0]];
        let (loss, _) = classification_loss(one.view(), &labels(&[0, 0])).unwrap();
        assert!(loss.abs() < TOL);

        // uniform logits -> ln c
        let c = 7;
        let uniform = Array2::zeros((3, c));
        let (loss, _) = classification_loss(uniform.view(), &labels(&[0, 3, 6])).unwrap();
        assert!((loss - (c as f64).ln()).abs() < TOL);

        // frozen two-logit value
        let two = array![[2.0, 0.0]];
        let (loss, _) = classification_loss(two.view(), &labels(&[0])).unwrap();
        let expected = (1.0 + (-2.0_f64).exp()).ln(); // 0.12693...
        assert!((loss - expected).abs() < TOL);
        assert!((loss - 0.12693).abs() < 1e-5);

        // shift invariance
        let shifted = array![[102.0, 100.0]];
        let (loss2, _) = classification_loss(shifted.view(), &labels(&[0])).unwrap();
        assert!((loss - loss2).abs() < 1e-9);

        assert!(classification_loss(two.view(), &labels(&[5])).is_err());
    }

    #[test]
    fn total_combination() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, 1.0, &w) - 2.0502).abs() < TOL);
        let off = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        assert_eq!(total_loss(0.25, 9.0, 9.0, 0.5, &off), 0.75);
    }

    #[test]
    fn losses_lower_bounds() {
        // L_sp >= entropy of the soft target rows
        let g = array![[0.9, -0.1], [0.2, 0.4], [-0.6, 0.3]];
        let gt = array![[0.3, 0.1], [-0.2, 0.8], [0.5, 0.5]];
        let lab = labels(&[0, 0, 1]);
        let (loss, _, _) = sp_loss(g.view(), gt.view(), &lab).unwrap();
        let mut entropy = 0.0;
        for i in 0..3 {
            let agree: Vec<f64> = (0..3)
                .map(|j| if lab[i] == lab[j] { 1.0 } else { 0.0 })
                .collect();
            let norm: f64 = agree.iter().sum();
            for a in agree {
                let y = a / norm;
                if y > 0.0 {
                    entropy -= y * y.ln();
                }
            }
        }
        entropy /= 3.0;
        assert!(loss >= entropy - TOL, "loss {loss} < entropy floor {entropy}");
    }
}
