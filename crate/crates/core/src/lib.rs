//! Multi-task semantic segmentation with a hierarchical transformer encoder
//! and a decoder that exchanges information between task branches through
//! cross-task attention.
//!
//! Everything runs on a small reverse-mode tensor engine ([`graph`]) in
//! `f32`, with an `f64` mode used for finite-difference gradient checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod raster;
pub mod skeleton;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig};
pub use tensor::{Real, Tensor};
