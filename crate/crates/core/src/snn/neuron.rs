use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Threshold, penalty threshold and decay of the spiking units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    /// Activation threshold τ.
    pub tau: f64,
    /// Self-penalty threshold τ_p.
    pub tau_p: f64,
    /// Per-step decay λ of the inner excitation.
    pub lambda_decay: f64,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            tau: 1.0,
            tau_p: 1.5,
            lambda_decay: 0.9,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.tau_p > 0.0) {
            return Err(Error::Config(format!(
                "thresholds must be positive (tau={}, tau_p={})",
                self.tau, self.tau_p
            )));
        }
        if !(0.0..1.0).contains(&self.lambda_decay) {
            return Err(Error::Config(format!(
                "decay must lie in [0, 1), got {}",
                self.lambda_decay
            )));
        }
        Ok(())
    }

    /// Fraction of the excitation removed after a spike, τ_p/τ.
    pub fn penalty(&self) -> f64 {
        self.tau_p / self.tau
    }
}

/// One timestep of the neuron, built from elementary tape ops.
///
/// `x = i + λ·x_prev`, `y = relu(x − τ)`, `p = [y > 0]`, `x_next = x·(1 − p·τ_p/τ)`.
/// Returns `(y, x_next)`. The gate `p` enters the graph as a constant.
pub fn neuron_step(tape: &mut Tape, input: Var, x_prev: Var, cfg: &NeuronConfig) -> Result<(Var, Var)> {
    let decayed = tape.scale(x_prev, cfg.lambda_decay);
    let x = tape.add(input, decayed)?;
    let shifted = tape.add_scalar(x, -cfg.tau);
    let y = tape.relu(shifted);
    let keep: Vec<f64> = tape
        .value(y)
        .iter()
        .map(|&v| if v > 0.0 { 1.0 - cfg.penalty() } else { 1.0 })
        .collect();
    let x_next = tape.mul_const(x, keep)?;
    if tape.value(x_next).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("neuron state became non-finite".into()));
    }
    Ok((y, x_next))
}
