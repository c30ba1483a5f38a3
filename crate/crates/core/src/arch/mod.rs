//! Dense-block networks built from learned group convolutions.

pub mod graph;
pub mod spec;

pub use graph::{
    build, build_baseline, build_condensenext, forward, DenseBlock, Forward, ForwardMode, LayerGraph, LayerKind,
    LayerNode, Lgc, Norm, SpatialConv, Stage,
};
pub use spec::{ModelSpec, Variant};
