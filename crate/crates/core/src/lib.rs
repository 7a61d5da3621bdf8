//! Learned image compression built on contextual clustering.

pub mod attention;
pub mod cluster;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod model;
pub mod pqf;
pub mod selftest;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{ClicError, DecodeError, Result};
pub use tensor::{FeatureGrid, Graph, ParamId, ParamStore, ParamTensor, Real, Tape, Tensor, Var};
