//! Differentiable layer primitives. Each op has a plain tensor function and a
//! [`Tape`](crate::tape::Tape) method that records its backward rule.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;

pub use activation::{relu6, relu6_scalar, RELU6_CAP};
pub use conv::{
    conv2d, conv2d_depthwise, conv2d_grouped, conv2d_pointwise, conv2d_standard, learned_group_conv, ConvConfig,
    ConvMode, GroupMask,
};
pub use dense::{dropout, linear, log_softmax, softmax};
pub use norm::{batch_norm, BatchStats, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use pool::{avg_pool, global_avg_pool};
