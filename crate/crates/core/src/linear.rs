use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::module::{join, Module, Slot};
use crate::ops::{add_row_bias, matmul};
use crate::rng::normal_param;
use crate::tensor::Tensor;

/// Row-wise affine map `x·W (+ b)` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, bias: bool) -> Self {
        let weight = normal_param(rng, &[inputs, outputs], (1.0 / inputs as f64).sqrt());
        let bias = bias.then(|| Tensor::param(vec![0.0; outputs], &[outputs]).expect("nonzero width"));
        Linear { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => add_row_bias(&y, b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a>)) {
        f(join(prefix, "W"), Slot::Param(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            f(join(prefix, "b"), Slot::Param(b));
        }
    }
}
