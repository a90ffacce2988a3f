//! Discrete dictionary-based decomposition (D3) of tensor product
//! representations, hosted in a fast weight memory network and trained on
//! systematic associative recall.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! element type to `f64`, which is what training, checkpoints and the CLI use.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod d3;
pub mod error;
pub mod fwm;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod rng;
pub mod sar;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Mode, Var};
pub use scalar::Scalar;

/// Element type used throughout training and analysis.
pub type Real = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type Graph = graph::Graph<Real>;
pub type ParamStore = param::ParamStore<Real>;
pub type AdamState = optim::AdamState<Real>;
