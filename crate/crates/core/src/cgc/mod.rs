//! Context-gated convolution: a convolution whose kernel is rescaled per
//! sample by a gate computed from a pooled summary of the input.

pub mod config;
pub mod graph;
pub mod layer;
pub mod params;
pub mod sequence;

pub use config::{default_latent, interact_groups, CgcConfig, Combine, GateOptions, GateParamCounts, Variant};
pub use graph::{cgc_forward, decode_gate, encode_context, interact_channels, modulate_kernel, plain_conv, CgcTrace, Context, GateEnv};
pub use layer::{CgcLayer, CgcOp, CgcOutputs};
pub use params::{CgcParams, CgcRunning, CgcSlots, CgcVars};
pub use sequence::{cgc_seq_forward, SeqCgcLayer, SeqConfig, SeqParams, SeqSlots, SeqVars};
