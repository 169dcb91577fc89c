//! Affine layers and small MLPs on top of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A [`Linear`] whose parameters are recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization for weight and bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::matrix(in_dim, out_dim, w).expect("sized").with_grad(),
            bias: Tensor::vector(b).with_grad(),
        }
    }

    /// Layer with explicit parameters, used by tests and loaders.
    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.shape()[1] {
            return Err(Error::dim("linear", format!("weight {:?} bias {:?}", weight.shape(), bias.shape())));
        }
        Ok(Linear { weight: weight.with_grad(), bias: bias.with_grad() })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear { weight: tape.leaf(&self.weight), bias: tape.leaf(&self.bias) }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Pulls the gradients of a bound copy back into this layer.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundLinear) -> Result<()> {
        tape.write_grad(bound.weight, &mut self.weight)?;
        tape.write_grad(bound.bias, &mut self.bias)
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_bias(h, self.bias)
    }
}
