//! Named trainable parameters and ordered parameter sets.
//!
//! A `Parameter` owns the current value as a requires-grad leaf tensor;
//! optimizers replace the leaf after each step, so graphs from earlier steps
//! can never alias freshly updated data.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

struct ParamInner {
    name: String,
    tensor: RefCell<Tensor>,
    /// Optional clamp applied after optimizer updates (used for log-scale
    /// temperature parameters).
    bounds: Option<(f64, f64)>,
}

#[derive(Clone)]
pub struct Parameter(Rc<ParamInner>);

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Parameter {
        let tensor = Tensor::leaf(data, shape).expect("parameter shape/data mismatch");
        Parameter(Rc::new(ParamInner {
            name: name.into(),
            tensor: RefCell::new(tensor),
            bounds: None,
        }))
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Parameter {
        Parameter::new(name, vec![value], &[1])
    }

    pub fn with_bounds(self, lo: f64, hi: f64) -> Parameter {
        let inner = ParamInner {
            name: self.0.name.clone(),
            tensor: RefCell::new(self.0.tensor.borrow().clone()),
            bounds: Some((lo, hi)),
        };
        Parameter(Rc::new(inner))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.tensor.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.tensor.borrow().numel()
    }

    /// Handle to the current leaf tensor; use this in forward passes.
    pub fn tensor(&self) -> Tensor {
        self.0.tensor.borrow().clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.0.tensor.borrow().data().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.tensor.borrow().grad()
    }

    /// Install new values as a fresh leaf (clears any recorded gradient).
    pub fn set_data(&self, mut data: Vec<f64>) {
        if let Some((lo, hi)) = self.0.bounds {
            for v in &mut data {
                *v = v.clamp(lo, hi);
            }
        }
        let shape = self.shape();
        let tensor = Tensor::leaf(data, &shape).expect("set_data shape mismatch");
        *self.0.tensor.borrow_mut() = tensor;
    }

    /// Drop any accumulated gradient without changing values.
    pub fn clear_grad(&self) {
        let data = self.data();
        let shape = self.shape();
        *self.0.tensor.borrow_mut() = Tensor::leaf(data, &shape).expect("clear_grad");
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parameter({}, shape={:?})", self.0.name, self.shape())
    }
}

/// Parameters in registration order; order defines checkpoint layout and
/// must be deterministic across runs.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, param: Parameter) -> Parameter {
        assert!(
            self.get(param.name()).is_none(),
            "duplicate parameter name: {}",
            param.name()
        );
        self.params.push(param.clone());
        param
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn clear_grads(&self) {
        for p in &self.params {
            p.clear_grad();
        }
    }
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, deterministic from
/// the caller's RNG.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}
