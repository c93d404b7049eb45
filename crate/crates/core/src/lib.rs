//! Desk-scale laboratory for memory-augmented efficient attention.
//!
//! Implements vanilla Transformer, Luna and ConvLuna encoder blocks on a
//! minimal reverse-mode tensor engine, trains them on synthetic
//! long-sequence tasks, and quantifies memory degradation with dedicated
//! diagnostics plus a Friedman/Holm comparison protocol.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod diagnostics;
pub mod elem;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod params;

pub mod tasks;
pub mod train;

pub use elem::{Dtype, Elem};
pub use error::{Error, Result};
pub use graph::{FlopCounter, Graph, TensorId};
pub use params::{ParamId, ParamKind, Parameters};
