//! A small, deterministic engine for 3D convolutional networks.
//!
//! Tensors are single-sample and channel-last (`D×H×W×C`). Convolutions run
//! as chunked im2col + GEMM, and every reduction is performed over a fixed
//! chunk layout so results do not depend on the number of worker threads.
//! Batching is done by accumulating gradients over samples.

pub mod adam;
pub mod conv;
pub mod error;
pub mod fpenv;
pub mod graph;
pub mod par;
pub mod params;
pub mod real;
pub mod tensor;

pub use adam::{cosine_lr, Adam, AdamConfig};
pub use conv::ConvGeom;
pub use error::NnError;
pub use fpenv::FlushDenormals;
pub use graph::{Graph, NodeGrads, Var};
pub use params::{Gradients, ParamId, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
