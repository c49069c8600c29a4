//! Learnable parameters and non-learnable state buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Param {
    /// Fan-in-scaled normal initialization: `std = sqrt(2 / fan_in)`.
    pub fn randn<R: Rng>(name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let value = (0..len).map(|_| dist.sample(rng) as f32).collect();
        Self {
            name: name.to_string(),
            value,
            grad: vec![0.0; len],
            shape: shape.to_vec(),
        }
    }

    pub fn constant(name: &str, shape: &[usize], v: f32) -> Self {
        let len: usize = shape.iter().product();
        Self {
            name: name.to_string(),
            value: vec![v; len],
            grad: vec![0.0; len],
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Non-learnable persistent state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f32>,
}

impl Buffer {
    pub fn new(name: &str, len: usize, v: f32) -> Self {
        Self {
            name: name.to_string(),
            value: vec![v; len],
        }
    }
}

/// Fixed-order traversal of a module's parameters and buffers. The visit
/// order defines both the optimizer state layout and the checkpoint layout,
/// so it must be stable across builds of the same configuration.
pub trait Visit {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer));
}
