use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer as _, ParamsAdamW};

use crate::error::Result;

/// AdamW over a fixed parameter list.
pub struct Optimizer {
    inner: AdamW,
    steps: usize,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr: learning_rate,
            weight_decay,
            ..Default::default()
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
            steps: 0,
        })
    }

    /// Backpropagates `loss` and applies one update; returns the loss value.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let value = loss.to_scalar::<f64>()?;
        self.inner.backward_step(loss)?;
        self.steps += 1;
        Ok(value)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr)
    }
}
