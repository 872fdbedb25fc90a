//! Central finite-difference oracles for verifying `backward()`.
//!
//! These evaluate the checked function as a black box and never touch the
//! adjoint rules, so they stay independent of the path they verify.

use crate::param::Parameter;

use super::{Result, Tensor, TensorError};

/// Central finite differences of a scalar function at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let base = x.data().to_vec();
    let shape = x.shape().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = eval_scalar(&f, plus, &shape)?;
        let fm = eval_scalar(&f, minus, &shape)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite("finite_diff_grad"));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

fn eval_scalar<F>(f: &F, data: Vec<f64>, shape: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = Tensor::from_vec(data, shape)?;
    let out = f(&x)?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalarLoss(out.numel()));
    }
    Ok(out.item())
}

/// Relative error with a guard so that near-zero pairs are compared
/// absolutely instead of blowing up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Run `backward()` on `f(x)` and compare the leaf gradient against central
/// finite differences; returns the max relative error over coordinates.
pub fn check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::leaf(x.data().to_vec(), x.shape())?;
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let numeric = finite_diff_grad(&f, x, h)?;
    Ok(max_rel_err(&analytic, &numeric))
}

/// Finite differences of a parameterized scalar function with respect to the
/// given coordinates of `param`. The closure re-runs the forward pass and
/// must read the parameter's current value each call.
pub fn finite_diff_wrt_param<F>(
    f: F,
    param: &Parameter,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    F: Fn() -> Result<Tensor>,
{
    let base = param.data();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut plus = base.clone();
        plus[c] += h;
        param.set_data(plus);
        let fp = f()?.item();
        let mut minus = base.clone();
        minus[c] -= h;
        param.set_data(minus);
        let fm = f()?.item();
        param.set_data(base.clone());
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite("finite_diff_wrt_param"));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}
