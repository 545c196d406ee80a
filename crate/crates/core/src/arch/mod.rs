//! Architecture descriptors and analytic cost accounting.

pub mod cost;
pub mod descriptor;

pub use cost::{count_macs, count_params, naive_gate_cost, CostReport, GateMacs, LayerCost, MacConvention};
pub use descriptor::{
    stage_filter, ArchDescriptor, BlockKind, ConvLayer, Extent, Layer, LayerOp, LayerSpec, Network, PoolLayer, Shortcut,
    ShortcutKind,
};
