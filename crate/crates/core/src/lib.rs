//! Lightweight U-Net speech enhancement with multi-path Taylor-attention
//! transformer blocks and deformable embeddings, built on a small
//! reverse-mode tensor engine.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod deform;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod met;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod wav;

pub use autodiff::{Activation, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use kernels::Conv2dOptions;
pub use params::{ParamId, ParamStore};
pub use tensor::{Precision, Tensor};
