//! Joint multi-prior encoding for vessel segmentation.
//!
//! The crate is organised bottom-up: [`volume`] holds the grid types and file
//! format; [`phantom`] and [`ingest`] produce training volumes; [`topo`]
//! provides distance transforms and skeletons; [`prior`] trains the shape,
//! topology and joint auto-encoders; [`seg`] trains the segmenter with the
//! prior regularizers; [`metrics`] scores results and [`harness`] runs the
//! cross-validated ablation.

pub mod error;
pub mod harness;
pub mod ingest;
pub mod metrics;
mod net;
pub mod phantom;
pub mod prior;
pub mod seg;
pub mod topo;
pub mod volume;

pub use error::{Error, Result};
pub use jmpe_nn::par;
