//! Minimal tensor + reverse-mode autodiff toolkit: NCHW convolution, the
//! handful of pooling/resampling ops the models need, Adam, and a tensor
//! archive format for checkpoints.

pub mod archive;
pub mod error;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use float::Float;
pub use graph::{CropBox, Grads, Graph, Var};
pub use optim::{Adam, AdamConfig, GradBuf};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
