//! Differentiable composites built from the primitive op set.

use super::{Result, Tensor, TensorError};

const NORM_EPS_SQ: f64 = 1e-24;

/// Row-wise softmax of a rank-2 tensor, stabilized by subtracting each
/// row's maximum before exponentiation. The shift is treated as a constant,
/// which leaves the gradient exact because softmax is shift-invariant.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(TensorError::NonFinite("softmax_rows"));
    }
    let shifted = shift_by_row_max(x)?;
    let e = shifted.exp();
    let inv_sum = e.sum_rows()?.pow_scalar(-1.0);
    e.mul_colvec(&inv_sum)
}

/// Row-wise log-softmax; preferred over `softmax_rows(...).log()` wherever a
/// cross-entropy needs the log directly.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(TensorError::NonFinite("log_softmax_rows"));
    }
    let shifted = shift_by_row_max(x)?;
    let lse = shifted.exp().sum_rows()?.log();
    shifted.add_colvec(&lse.neg())
}

fn shift_by_row_max(x: &Tensor) -> Result<Tensor> {
    let m = x.shape()[0];
    let n = x.shape()[1];
    let mut neg_max = vec![0.0; m];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        neg_max[i] = -row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    x.add_colvec(&Tensor::from_vec(neg_max, &[m, 1])?)
}

/// L2-normalize each row, with an epsilon guard for zero rows.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let sq = x.mul(x)?;
    let inv_norm = sq.sum_rows()?.add_scalar(NORM_EPS_SQ).pow_scalar(-0.5);
    x.mul_colvec(&inv_norm)
}

/// Cosine similarity between two single-row (or flat) vectors.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_sim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let dot = a.mul(b)?.sum();
    let na = a.mul(a)?.sum().add_scalar(NORM_EPS_SQ).pow_scalar(-0.5);
    let nb = b.mul(b)?.sum().add_scalar(NORM_EPS_SQ).pow_scalar(-0.5);
    dot.mul(&na)?.mul(&nb)
}

/// Pairwise cosine similarities: `a` is `m x d`, `b` is `n x d`, output `m x n`.
pub fn cosine_sim_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_sim_matrix",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let an = normalize_rows(a)?;
    let bn = normalize_rows(b)?;
    an.matmul(&bn.transpose()?)
}

/// GELU activation (tanh approximation).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let cubic = x.pow_scalar(3.0).scale(0.044715);
    let inner = x.add(&cubic)?.scale(SQRT_2_OVER_PI);
    let t = inner.tanh().add_scalar(1.0);
    x.scale(0.5).mul(&t)
}

/// Row-wise layer normalization without affine parameters:
/// `(x - mean) / sqrt(var + eps)` per row.
pub fn layer_norm_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.shape()[1] as f64;
    let neg_mean = x.sum_rows()?.scale(-1.0 / n);
    let centered = x.add_colvec(&neg_mean)?;
    let var = centered.mul(&centered)?.sum_rows()?.scale(1.0 / n);
    let inv_std = var.add_scalar(eps).pow_scalar(-0.5);
    centered.mul_colvec(&inv_std)
}
