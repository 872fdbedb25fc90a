//! Dense 64-bit tensors with reverse-mode gradient computation.
//!
//! Tensors are immutable once built; `backward()` on a scalar populates a
//! per-tensor gradient buffer for every `requires_grad` leaf reachable from
//! the loss. The op set is exactly what the encoders and losses need, each
//! op with a hand-written adjoint that is checked against central finite
//! differences in the test suite.

mod autograd;
mod functional;
pub mod gradcheck;

pub use functional::{
    cosine_sim, cosine_sim_matrix, gelu, layer_norm_rows, log_softmax_rows, normalize_rows,
    softmax_rows,
};

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("{op}: index {index} out of bounds for axis of size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Node provenance for the backward pass. Inputs are held by handle, so a
/// graph is dropped as soon as its loss tensor goes out of scope.
#[derive(Clone)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Min(Tensor, Tensor),
    Max(Tensor, Tensor),
    Neg(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    LogSigmoid(Tensor),
    PowScalar(Tensor, f64),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SumRows(Tensor),
    AddColVec(Tensor, Tensor),
    MulColVec(Tensor, Tensor),
    AddRowVec(Tensor, Tensor),
    MulRowVec(Tensor, Tensor),
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    SliceRows(Tensor, usize, usize),
    SliceCols(Tensor, usize, usize),
    GatherRows(Tensor, Rc<Vec<usize>>),
    MaskedFill(Tensor, Rc<Vec<bool>>),
    Reshape(Tensor),
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) op: Option<Op>,
}

/// Handle to an immutable tensor node; cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    fn node(data: Vec<f64>, shape: Vec<usize>, op: Op, inputs_require: bool) -> Tensor {
        if inputs_require {
            Tensor::build(data, shape, true, Some(op))
        } else {
            // Prune constant subgraphs so they never enter the backward pass.
            Tensor::build(data, shape, false, None)
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::BadShape {
                op: "from_vec",
                expected: "product(shape) == data length",
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::build(data, shape.to_vec(), false, None))
    }

    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor::build(
            t.inner.data.clone(),
            t.inner.shape.clone(),
            true,
            None,
        ))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::build(vec![v], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(vec![0.0; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::build(vec![1.0; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Gradient buffer populated by the last `backward()`, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Leaf copy with no gradient flow.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::BadShape {
                op,
                expected: "rank-2 tensor",
                shape: self.inner.shape.clone(),
            }),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.inner.shape != other.inner.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        Ok(())
    }

    // ---- elementwise binary ----

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, bool)> {
        self.same_shape(other, op)?;
        let data = self
            .inner
            .data
            .iter()
            .zip(&other.inner.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok((data, self.requires_grad() || other.requires_grad()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (data, rg) = self.zip(other, "add", |a, b| a + b)?;
        Ok(Tensor::node(data, self.inner.shape.clone(), Op::Add(self.clone(), other.clone()), rg))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (data, rg) = self.zip(other, "sub", |a, b| a - b)?;
        Ok(Tensor::node(data, self.inner.shape.clone(), Op::Sub(self.clone(), other.clone()), rg))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (data, rg) = self.zip(other, "mul", |a, b| a * b)?;
        Ok(Tensor::node(data, self.inner.shape.clone(), Op::Mul(self.clone(), other.clone()), rg))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (data, rg) = self.zip(other, "div", |a, b| a / b)?;
        Ok(Tensor::node(data, self.inner.shape.clone(), Op::Div(self.clone(), other.clone()), rg))
    }

    /// Elementwise minimum; ties route the gradient to the left input.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        let (data, rg) = self.zip(other, "minimum", f64::min)?;
        Ok(Tensor::node(data, self.inner.shape.clone(), Op::Min(self.clone(), other.clone()), rg))
    }

    /// Elementwise maximum; ties route the gradient to the left input.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        let (data, rg) = self.zip(other, "maximum", f64::max)?;
        Ok(Tensor::node(data, self.inner.shape.clone(), Op::Max(self.clone(), other.clone()), rg))
    }

    // ---- elementwise unary ----

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.inner.data.iter().map(|v| f(*v)).collect();
        Tensor::node(data, self.inner.shape.clone(), op, self.requires_grad())
    }

    pub fn neg(&self) -> Tensor {
        self.map(Op::Neg(self.clone()), |v| -v)
    }

    pub fn exp(&self) -> Tensor {
        self.map(Op::Exp(self.clone()), f64::exp)
    }

    pub fn log(&self) -> Tensor {
        self.map(Op::Log(self.clone()), f64::ln)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(Op::Tanh(self.clone()), f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(Op::Sigmoid(self.clone()), stable_sigmoid)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&self) -> Tensor {
        self.map(Op::LogSigmoid(self.clone()), stable_log_sigmoid)
    }

    pub fn pow_scalar(&self, e: f64) -> Tensor {
        self.map(Op::PowScalar(self.clone(), e), |v| v.powf(e))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(Op::Scale(self.clone(), c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(Op::AddScalar(self.clone()), |v| v + c)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        let data = mat_mul(&self.inner.data, &other.inner.data, m, k, n);
        Ok(Tensor::node(
            data,
            vec![m, n],
            Op::Matmul(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.inner.data[i * n + j];
            }
        }
        Ok(Tensor::node(data, vec![n, m], Op::Transpose(self.clone()), self.requires_grad()))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let s = self.inner.data.iter().sum();
        Tensor::node(vec![s], vec![1], Op::Sum(self.clone()), self.requires_grad())
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.inner.data.iter().sum();
        Tensor::node(vec![s / n], vec![1], Op::Mean(self.clone()), self.requires_grad())
    }

    /// Row sums of a rank-2 tensor, shape `[m, 1]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("sum_rows")?;
        let data = (0..m)
            .map(|i| self.inner.data[i * n..(i + 1) * n].iter().sum())
            .collect();
        Ok(Tensor::node(data, vec![m, 1], Op::SumRows(self.clone()), self.requires_grad()))
    }

    // ---- broadcast against row / column vectors ----

    fn colvec_check(&self, v: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(op)?;
        let (vm, vn) = v.dims2(op)?;
        if vm != m || vn != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.inner.shape.clone(),
                rhs: v.inner.shape.clone(),
            });
        }
        Ok((m, n))
    }

    fn rowvec_check(&self, v: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(op)?;
        let (vm, vn) = v.dims2(op)?;
        if vm != 1 || vn != n {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.inner.shape.clone(),
                rhs: v.inner.shape.clone(),
            });
        }
        Ok((m, n))
    }

    /// `[m, n] + [m, 1]` broadcast over columns.
    pub fn add_colvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.colvec_check(v, "add_colvec")?;
        let mut data = self.inner.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += v.inner.data[i];
            }
        }
        Ok(Tensor::node(
            data,
            vec![m, n],
            Op::AddColVec(self.clone(), v.clone()),
            self.requires_grad() || v.requires_grad(),
        ))
    }

    /// `[m, n] * [m, 1]` broadcast over columns.
    pub fn mul_colvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.colvec_check(v, "mul_colvec")?;
        let mut data = self.inner.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= v.inner.data[i];
            }
        }
        Ok(Tensor::node(
            data,
            vec![m, n],
            Op::MulColVec(self.clone(), v.clone()),
            self.requires_grad() || v.requires_grad(),
        ))
    }

    /// `[m, n] + [1, n]` broadcast over rows.
    pub fn add_rowvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rowvec_check(v, "add_rowvec")?;
        let mut data = self.inner.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += v.inner.data[j];
            }
        }
        Ok(Tensor::node(
            data,
            vec![m, n],
            Op::AddRowVec(self.clone(), v.clone()),
            self.requires_grad() || v.requires_grad(),
        ))
    }

    /// `[m, n] * [1, n]` broadcast over rows.
    pub fn mul_rowvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rowvec_check(v, "mul_rowvec")?;
        let mut data = self.inner.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= v.inner.data[j];
            }
        }
        Ok(Tensor::node(
            data,
            vec![m, n],
            Op::MulRowVec(self.clone(), v.clone()),
            self.requires_grad() || v.requires_grad(),
        ))
    }

    // ---- structure ----

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Empty("concat_rows"));
        }
        let (_, n) = parts[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2("concat_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].inner.shape.clone(),
                    rhs: p.inner.shape.clone(),
                });
            }
            rows += pm;
            data.extend_from_slice(&p.inner.data);
        }
        let rg = parts.iter().any(Tensor::requires_grad);
        Ok(Tensor::node(data, vec![rows, n], Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Empty("concat_cols"));
        }
        let (m, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].inner.shape.clone(),
                    rhs: p.inner.shape.clone(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            for i in 0..m {
                data[i * n + off..i * n + off + w]
                    .copy_from_slice(&p.inner.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(Tensor::requires_grad);
        Ok(Tensor::node(data, vec![m, n], Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if start + len > m {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_rows",
                index: start + len,
                size: m,
            });
        }
        let data = self.inner.data[start * n..(start + len) * n].to_vec();
        Ok(Tensor::node(
            data,
            vec![len, n],
            Op::SliceRows(self.clone(), start, len),
            self.requires_grad(),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.inner.data[i * n + start..i * n + start + len]);
        }
        Ok(Tensor::node(
            data,
            vec![m, len],
            Op::SliceCols(self.clone(), start, len),
            self.requires_grad(),
        ))
    }

    /// Select rows by index (embedding lookup); gradients scatter-add back.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &ix in indices {
            if ix >= m {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: ix,
                    size: m,
                });
            }
            data.extend_from_slice(&self.inner.data[ix * n..(ix + 1) * n]);
        }
        Ok(Tensor::node(
            data,
            vec![indices.len(), n],
            Op::GatherRows(self.clone(), Rc::new(indices.to_vec())),
            self.requires_grad(),
        ))
    }

    /// Replace masked entries with `value`; masked entries get zero gradient.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(TensorError::BadShape {
                op: "masked_fill",
                expected: "mask length == numel",
                shape: self.inner.shape.clone(),
            });
        }
        let data = self
            .inner
            .data
            .iter()
            .zip(mask)
            .map(|(v, m)| if *m { value } else { *v })
            .collect();
        Ok(Tensor::node(
            data,
            self.inner.shape.clone(),
            Op::MaskedFill(self.clone(), Rc::new(mask.to_vec())),
            self.requires_grad(),
        ))
    }

    /// Same data under a new shape; gradients pass through untouched.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "same element count",
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::node(
            self.inner.data.clone(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Reverse-mode pass from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        autograd::backward(self)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a @ b^T` where `a` is `m x k` and `b` is `n x k`.
pub(crate) fn mat_mul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[j * k + l];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a^T @ b` where `a` is `k x m` and `b` is `k x n`.
pub(crate) fn mat_mul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        for i in 0..m {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
