pub mod analysis;
pub mod arch;
pub mod checkpoint;
pub mod compression;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod tape;
pub mod tensor;
pub mod train;

pub use arch::{LayerGraph, ModelSpec, Variant};
pub use error::{Error, Result};
pub use param::Param;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Fill, Real, Tensor};
