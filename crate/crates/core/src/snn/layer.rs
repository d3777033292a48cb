use rand::Rng;

use super::neuron::NeuronConfig;
use crate::autodiff::{BatchNorm, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Dense synapse → batch norm → spiking units, with the membrane state carried
/// between calls until [`SpikingLayer::reset_state`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingLayer {
    /// `[inputs, outputs]`.
    pub weight: Tensor,
    /// `[outputs]`.
    pub bias: Tensor,
    pub bn: BatchNorm,
    pub config: NeuronConfig,
    /// Flattened `[b, m]` inner excitation; `None` is the rest state (all zero).
    membrane: Option<Vec<f64>>,
}

/// What a layer is fed: either one frame repeated over `steps` timesteps, or
/// an explicit timestep-major `[t·b, n]` sequence.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput {
    Constant { frame: Var, steps: usize },
    Sequence { rows: Var, steps: usize },
}

impl LayerInput {
    pub fn steps(&self) -> usize {
        match *self {
            LayerInput::Constant { steps, .. } | LayerInput::Sequence { steps, .. } => steps,
        }
    }
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl SpikingLayer {
    /// Uniform `±sqrt(1/inputs)` weights, zero bias, fresh batch norm.
    pub fn new(inputs: usize, outputs: usize, config: NeuronConfig, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        SpikingLayer {
            weight: Tensor::new(&[inputs, outputs], weights)
                .expect("positive extents")
                .with_grad(),
            bias: Tensor::zeros(&[outputs]).with_grad(),
            bn: BatchNorm::new(outputs),
            config,
            membrane: None,
        }
    }

    /// Assembles a layer from stored parts, validating their shapes.
    pub fn from_parts(weight: Tensor, bias: Tensor, bn: BatchNorm, config: NeuronConfig) -> Result<Self> {
        let &[n, m] = weight.shape() else {
            return Err(Error::Dimension(format!(
                "weight must be 2-D, got {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [m] || bn.features() != m || bn.gamma.shape() != [m] || bn.beta.shape() != [m] {
            return Err(Error::Dimension(format!(
                "layer {n}x{m} given bias {:?}, batch norm over {} features",
                bias.shape(),
                bn.features()
            )));
        }
        config.validate()?;
        Ok(SpikingLayer {
            weight,
            bias,
            bn,
            config,
            membrane: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn reset_state(&mut self) {
        self.membrane = None;
    }

    /// Current inner excitation for a batch of `batch` items.
    pub fn membrane(&self, batch: usize) -> Result<Tensor> {
        let m = self.outputs();
        match &self.membrane {
            None => Ok(Tensor::zeros(&[batch, m])),
            Some(v) if v.len() == batch * m => Tensor::new(&[batch, m], v.clone()),
            Some(v) => Err(Error::State(format!(
                "membrane holds a batch of {} but {batch} was requested; reset the state first",
                v.len() / m
            ))),
        }
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.weight, &self.bias, &self.bn.gamma, &self.bn.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.weight, &mut self.bias, &mut self.bn.gamma, &mut self.bn.beta]
    }

    pub fn bind(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
            gamma: tape.leaf(&self.bn.gamma),
            beta: tape.leaf(&self.bn.beta),
        }
    }

    /// Synapse and batch norm over every timestep at once, returning
    /// timestep-major `[t·b, m]` rows.
    ///
    /// For a constant input the synapse and normalization are evaluated on the
    /// single frame and then repeated: the per-feature mean and (biased)
    /// variance over `t` identical copies equal those over one copy.
    fn drive(&mut self, tape: &mut Tape, vars: &LayerVars, input: LayerInput, mode: Mode) -> Result<Var> {
        let (rows, repeat) = match input {
            LayerInput::Constant { frame, steps } => (frame, steps),
            LayerInput::Sequence { rows, .. } => (rows, 1),
        };
        let syn = tape.linear(rows, vars.weight, vars.bias)?;
        let normed = self.bn.forward(tape, syn, vars.gamma, vars.beta, mode)?;
        if repeat > 1 {
            tape.repeat_rows(normed, repeat)
        } else {
            Ok(normed)
        }
    }

    fn drive_eval(&self, tape: &mut Tape, vars: &LayerVars, input: LayerInput) -> Result<Var> {
        let (rows, repeat) = match input {
            LayerInput::Constant { frame, steps } => (frame, steps),
            LayerInput::Sequence { rows, .. } => (rows, 1),
        };
        let syn = tape.linear(rows, vars.weight, vars.bias)?;
        let normed = self.bn.forward_eval(tape, syn, vars.gamma, vars.beta)?;
        if repeat > 1 {
            tape.repeat_rows(normed, repeat)
        } else {
            Ok(normed)
        }
    }

    fn batch_of(tape: &Tape, input: LayerInput) -> usize {
        match input {
            LayerInput::Constant { frame, .. } => tape.shape(frame)[0],
            LayerInput::Sequence { rows, steps } => tape.shape(rows)[0] / steps,
        }
    }

    /// Stateful forward: starts from the stored membrane and stores the final one.
    /// `index` only labels numeric errors.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        vars: &LayerVars,
        input: LayerInput,
        mode: Mode,
        index: usize,
    ) -> Result<Var> {
        let batch = Self::batch_of(tape, input);
        let initial = self.membrane(batch)?.into_data();
        let drive = self.drive(tape, vars, input, mode)?;
        let cfg = self.config;
        let (out, last) = tape.spiking(drive, batch, &initial, cfg.lambda_decay, cfg.tau, cfg.penalty(), index)?;
        self.membrane = Some(last);
        Ok(out)
    }

    /// Eval-mode forward from the rest state that leaves the layer untouched.
    pub fn infer(&self, tape: &mut Tape, vars: &LayerVars, input: LayerInput, index: usize) -> Result<Var> {
        let batch = Self::batch_of(tape, input);
        let initial = vec![0.0; batch * self.outputs()];
        let drive = self.drive_eval(tape, vars, input)?;
        let cfg = self.config;
        Ok(tape
            .spiking(drive, batch, &initial, cfg.lambda_decay, cfg.tau, cfg.penalty(), index)?
            .0)
    }
}

/// Runs one layer over a `[t, b, n]` spike train and returns `[t, b, m]`.
pub fn layer_forward(tape: &mut Tape, spikes_in: Var, layer: &mut SpikingLayer, mode: Mode) -> Result<Var> {
    let (t, b, n) = match *tape.shape(spikes_in) {
        [t, b, n] => (t, b, n),
        ref other => {
            return Err(Error::Dimension(format!(
                "layer input must be [t, b, n], got {other:?}"
            )))
        }
    };
    if n != layer.inputs() {
        return Err(Error::Spec(format!(
            "layer expects {} inputs but the train has {n}",
            layer.inputs()
        )));
    }
    let rows = tape.reshape(spikes_in, &[t * b, n])?;
    let vars = layer.bind(tape);
    let out = layer.forward(tape, &vars, LayerInput::Sequence { rows, steps: t }, mode, 0)?;
    tape.reshape(out, &[t, b, layer.outputs()])
}
