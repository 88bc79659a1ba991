//! Named trainable tensors and their initializers.

use alloc::string::String;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::Tensor;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether decoupled weight decay applies (false for norms and biases).
    pub decay: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        Self::new(name, Tensor::zeros(shape), decay)
    }

    pub fn ones(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        Self::new(name, Tensor::ones(shape), decay)
    }

    /// Glorot-uniform over a `[fan_in, fan_out]` style shape.
    pub fn glorot<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], rng: &mut R) -> Self {
        let (fan_in, fan_out) = match shape {
            [a] => (*a, 1),
            [a, b] => (*a, *b),
            _ => panic!("glorot init expects rank 1 or 2, got {shape:?}"),
        };
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        Self::new(name, Tensor::new(shape, data).expect("shape"), true)
    }

    /// Normal(0, std²) truncated to ±2 std by resampling.
    pub fn truncated_normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Self::new(name, Tensor::new(shape, data).expect("shape"), true)
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }

    /// Places the current value on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        tape.leaf(self.value.clone(), trainable)
    }
}
