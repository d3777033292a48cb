//! Spiking layers, multi-layer networks and the SAT → class reduction.

mod layer;
mod network;
mod neuron;

pub use layer::{layer_forward, LayerInput, LayerVars, SpikingLayer};
pub use network::{
    argmax_rows, classify_logits, network_forward, reset_state, ForwardTrace, Network, NetworkSpec, Role, Sat,
};
pub use neuron::{neuron_step, NeuronConfig};
