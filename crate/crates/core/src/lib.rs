//! Few-shot image identity recognition on CPU.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]),
//! layer primitives ([`nn`]), residual CNN classifiers ([`model`]), the
//! training objective and optimizers ([`training`]), dataset handling
//! ([`data`]), a checksummed weight format with transfer-learning helpers
//! ([`store`]) and occlusion-sensitivity saliency maps ([`saliency`]).

pub mod autodiff;
pub mod config;
pub mod data;
mod error;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod saliency;
pub mod store;
pub mod training;

pub use autodiff::{Element, Graph, Tensor, Var};
pub use error::{Error, Result};
pub use model::{Mode, Model, ModelSpec};
