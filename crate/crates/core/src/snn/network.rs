use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{LayerInput, LayerVars, SpikingLayer};
use super::neuron::NeuronConfig;
use crate::autodiff::{Gradients, Mode, SatDims, Tape, Tensor, Var};
use crate::data::SpikeTrainBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Ta,
    Student,
    Custom,
}

impl Role {
    pub fn parse(s: &str) -> Result<Role> {
        match s.to_ascii_lowercase().as_str() {
            "teacher" => Ok(Role::Teacher),
            "ta" | "assistant" => Ok(Role::Ta),
            "student" => Ok(Role::Student),
            "custom" => Ok(Role::Custom),
            other => Err(Error::Config(format!("unknown role `{other}` (teacher, ta, student)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Ta => "ta",
            Role::Student => "student",
            Role::Custom => "custom",
        }
    }
}

/// Architecture of a fully connected spiking network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input dimension followed by the width of every spiking layer; the last
    /// entry is the class count.
    pub widths: Vec<usize>,
    pub timesteps: usize,
    pub neuron: NeuronConfig,
    pub role: Role,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs an input width and at least one layer, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero width in {:?}", self.widths)));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timestep count must be at least 1".into()));
        }
        self.neuron.validate()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Output-layer activations laid out as `[t, c, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sat {
    dims: SatDims,
    data: Vec<f64>,
}

impl Sat {
    pub fn new(t: usize, c: usize, b: usize, data: Vec<f64>) -> Result<Sat> {
        if t * c * b != data.len() || t * c * b == 0 {
            return Err(Error::Dimension(format!(
                "SAT of {t}x{c}x{b} given {} values",
                data.len()
            )));
        }
        Ok(Sat {
            dims: SatDims { t, c, b },
            data,
        })
    }

    pub fn from_tape(tape: &Tape, v: Var) -> Result<Sat> {
        match *tape.shape(v) {
            [t, c, b] => Sat::new(t, c, b, tape.value(v).to_vec()),
            ref other => Err(Error::Dimension(format!("not a SAT shape: {other:?}"))),
        }
    }

    pub fn dims(&self) -> SatDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, step: usize, class: usize, item: usize) -> f64 {
        self.data[self.dims.index(step, class, item)]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.dims.t, self.dims.c, self.dims.b]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape(), self.data.clone()).expect("valid SAT")
    }

    /// Puts the SAT on a tape as a gradient-free constant.
    pub fn constant(&self, tape: &mut Tape) -> Var {
        tape.constant(&self.shape(), self.data.clone()).expect("valid SAT")
    }

    /// Joins SATs with equal `t` and `c` along the batch axis.
    pub fn concat(parts: &[Sat]) -> Result<Sat> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("no SATs to join".into()))?
            .dims;
        if let Some(bad) = parts.iter().find(|p| p.dims.t != first.t || p.dims.c != first.c) {
            return Err(Error::Dimension(format!(
                "cannot join {:?} with {:?}",
                bad.shape(),
                [first.t, first.c]
            )));
        }
        let b: usize = parts.iter().map(|p| p.dims.b).sum();
        let mut out = Vec::with_capacity(first.t * first.c * b);
        for step in 0..first.t {
            for j in 0..first.c {
                for p in parts {
                    let start = p.dims.index(step, j, 0);
                    out.extend_from_slice(&p.data[start..start + p.dims.b]);
                }
            }
        }
        Sat::new(first.t, first.c, b, out)
    }

    /// Keeps only the batch elements listed in `items`, in that order.
    pub fn select(&self, items: &[usize]) -> Sat {
        let d = self.dims;
        let mut out = Vec::with_capacity(d.t * d.c * items.len());
        for step in 0..d.t {
            for j in 0..d.c {
                out.extend(items.iter().map(|&k| self.at(step, j, k)));
            }
        }
        Sat::new(d.t, d.c, items.len(), out).expect("non-empty selection")
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[t, c, b]`.
    pub sat: Var,
    pub layer_vars: Vec<LayerVars>,
    /// Per layer, timestep-major `[t·b, width]` outputs.
    pub layer_outputs: Vec<Var>,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<SpikingLayer>,
}

impl Network {
    /// Builds a network with weights drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .widths
            .windows(2)
            .map(|w| SpikingLayer::new(w[0], w[1], spec.neuron, &mut rng))
            .collect();
        Ok(Network { spec, layers })
    }

    pub fn from_layers(spec: NetworkSpec, layers: Vec<SpikingLayer>) -> Result<Network> {
        spec.validate()?;
        if layers.len() != spec.depth() {
            return Err(Error::Spec(format!(
                "spec describes {} layers, {} given",
                spec.depth(),
                layers.len()
            )));
        }
        for (i, (l, w)) in layers.iter().zip(spec.widths.windows(2)).enumerate() {
            if l.inputs() != w[0] || l.outputs() != w[1] {
                return Err(Error::Spec(format!(
                    "layer {i} is {}x{} but the architecture says {}x{}",
                    l.inputs(),
                    l.outputs(),
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[SpikingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SpikingLayer] {
        &mut self.layers
    }

    pub fn reset_state(&mut self) {
        self.layers.iter_mut().for_each(SpikingLayer::reset_state);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Drops every gradient slot; a frozen network contributes nothing to a
    /// backward pass.
    pub fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(false));
    }

    pub fn unfreeze(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(true));
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    fn check_batch(&self, batch: &SpikeTrainBatch) -> Result<()> {
        if batch.input_dim() != self.spec.input_dim() {
            return Err(Error::Spec(format!(
                "network expects {} inputs, batch has {}",
                self.spec.input_dim(),
                batch.input_dim()
            )));
        }
        if batch.timesteps != self.spec.timesteps {
            return Err(Error::Spec(format!(
                "network runs {} timesteps, batch is encoded over {}",
                self.spec.timesteps, batch.timesteps
            )));
        }
        Ok(())
    }

    fn finish(
        &self,
        tape: &mut Tape,
        outputs: Vec<Var>,
        layer_vars: Vec<LayerVars>,
        batch: usize,
    ) -> Result<ForwardTrace> {
        let last = *outputs.last().expect("at least one layer");
        let sat = tape.rows_to_sat(last, batch)?;
        Ok(ForwardTrace {
            sat,
            layer_vars,
            layer_outputs: outputs,
            batch,
        })
    }

    fn run(&mut self, tape: &mut Tape, first: LayerInput, batch: usize, mode: Mode) -> Result<ForwardTrace> {
        let steps = first.steps();
        let mut input = first;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut vars = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let v = layer.bind(tape);
            let out = layer.forward(tape, &v, input, mode, i)?;
            vars.push(v);
            outputs.push(out);
            input = LayerInput::Sequence { rows: out, steps };
        }
        self.finish(tape, outputs, vars, batch)
    }

    /// Stateful forward of a constant-encoded batch. Membrane state carries
    /// over from the previous call unless [`Network::reset_state`] was called.
    pub fn forward(&mut self, tape: &mut Tape, batch: &SpikeTrainBatch, mode: Mode) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let frame = tape.leaf(&batch.frames);
        let input = LayerInput::Constant {
            frame,
            steps: batch.timesteps,
        };
        self.run(tape, input, batch.batch_size(), mode)
    }

    /// Stateful forward of an arbitrary `[t, b, n]` train.
    pub fn forward_sequence(&mut self, tape: &mut Tape, train: Var, mode: Mode) -> Result<ForwardTrace> {
        let (t, b, n) = match *tape.shape(train) {
            [t, b, n] => (t, b, n),
            ref other => return Err(Error::Dimension(format!("expected [t, b, n], got {other:?}"))),
        };
        if n != self.spec.input_dim() {
            return Err(Error::Spec(format!(
                "network expects {} inputs, train has {n}",
                self.spec.input_dim()
            )));
        }
        let rows = tape.reshape(train, &[t * b, n])?;
        self.run(tape, LayerInput::Sequence { rows, steps: t }, b, mode)
    }

    /// Eval-mode forward from the rest state; leaves `self` untouched, so a
    /// shared network can serve concurrent callers.
    pub fn infer_trace(&self, tape: &mut Tape, batch: &SpikeTrainBatch) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let steps = batch.timesteps;
        let frame = tape.constant(batch.frames.shape(), batch.frames.data().to_vec())?;
        let mut input = LayerInput::Constant { frame, steps };
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut vars = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let v = layer.bind(tape);
            let out = layer.infer(tape, &v, input, i)?;
            vars.push(v);
            outputs.push(out);
            input = LayerInput::Sequence { rows: out, steps };
        }
        self.finish(tape, outputs, vars, batch.batch_size())
    }

    pub fn infer(&self, batch: &SpikeTrainBatch) -> Result<Sat> {
        let mut tape = Tape::new();
        let trace = self.infer_trace(&mut tape, batch)?;
        Sat::from_tape(&tape, trace.sat)
    }

    /// Adds the gradients of the traced parameters into their slots.
    pub fn accumulate_grads(&mut self, grads: &Gradients, trace: &ForwardTrace) -> Result<()> {
        if trace.layer_vars.len() != self.layers.len() {
            return Err(Error::Contract("trace does not belong to this network".into()));
        }
        for (layer, v) in self.layers.iter_mut().zip(&trace.layer_vars) {
            grads.accumulate_into(v.weight, &mut layer.weight)?;
            grads.accumulate_into(v.bias, &mut layer.bias)?;
            grads.accumulate_into(v.gamma, &mut layer.bn.gamma)?;
            grads.accumulate_into(v.beta, &mut layer.bn.beta)?;
        }
        Ok(())
    }
}

/// Free-function form of [`Network::forward`].
pub fn network_forward(
    tape: &mut Tape,
    batch: &SpikeTrainBatch,
    net: &mut Network,
    mode: Mode,
) -> Result<ForwardTrace> {
    net.forward(tape, batch, mode)
}

pub fn reset_state(net: &mut Network) {
    net.reset_state();
}

/// Time-averaged class scores turned into per-item log-probabilities `[b, c]`.
pub fn classify_logits(tape: &mut Tape, sat: Var) -> Result<Var> {
    let mean = tape.time_mean(sat)?;
    tape.log_softmax(mean)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(values: &[f64], classes: usize) -> Vec<usize> {
    values
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for j in 1..classes {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
