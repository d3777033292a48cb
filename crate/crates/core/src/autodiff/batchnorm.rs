use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learnable scale/shift plus running statistics for `features` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of train-mode batches folded into the running statistics.
    pub updates: u64,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[features], 1.0).with_grad(),
            beta: Tensor::zeros(&[features]).with_grad(),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            updates: 0,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes every row of `input`. Train mode also folds the batch
    /// statistics into the running averages.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, gamma: Var, beta: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (out, mean, var) = tape.batch_norm(input, gamma, beta, self.eps, None)?;
                let k = self.momentum;
                for j in 0..self.features() {
                    self.running_mean[j] = (1.0 - k) * self.running_mean[j] + k * mean[j];
                    self.running_var[j] = (1.0 - k) * self.running_var[j] + k * var[j];
                }
                self.updates += 1;
                Ok(out)
            }
            Mode::Eval => self.forward_eval(tape, input, gamma, beta),
        }
    }

    pub fn forward_eval(&self, tape: &mut Tape, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        if self.updates == 0 {
            return Err(Error::State(
                "batch norm running statistics were never populated; train before evaluating".into(),
            ));
        }
        let stats = (self.running_mean.as_slice(), self.running_var.as_slice());
        Ok(tape.batch_norm(input, gamma, beta, self.eps, Some(stats))?.0)
    }
}
