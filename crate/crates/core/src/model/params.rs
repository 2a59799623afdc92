//! Parameter storage: a dense matrix paired with its gradient accumulator.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable 2-D tensor. `v` holds the values, `g` the accumulated
/// gradient of the current backward pass(es). Optimizers and checkpoints
/// reach every tensor through the model's name visitor, so the pair stays
/// self-contained.
#[derive(Debug, Clone)]
pub struct Tensor2 {
    pub v: Array2<f64>,
    pub g: Array2<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Tensor2 {
        Tensor2 {
            v: Array2::zeros((rows, cols)),
            g: Array2::zeros((rows, cols)),
        }
    }

    /// Filled with a constant value (used for layer-norm gains).
    pub fn constant(rows: usize, cols: usize, value: f64) -> Tensor2 {
        Tensor2 {
            v: Array2::from_elem((rows, cols), value),
            g: Array2::zeros((rows, cols)),
        }
    }

    /// Gaussian init `N(0, std^2)`, filled in row-major order so a given
    /// (shape, std, rng state) always produces the same tensor.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor2 {
        let normal = Normal::new(0.0, std).expect("std validated by config");
        let mut v = Array2::zeros((rows, cols));
        for x in v.iter_mut() {
            *x = normal.sample(rng);
        }
        Tensor2 {
            v,
            g: Array2::zeros((rows, cols)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        let s = self.v.dim();
        (s.0, s.1)
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}
