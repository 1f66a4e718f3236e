//! Hyper-convolutions: convolution layers whose kernels are produced by a small
//! coordinate-conditioned network, plus the UNet and flat segmentation
//! backbones built from them, a deterministic training harness, and kernel
//! smoothness/reconstruction diagnostics.
//!
//! Everything runs on the CPU with a small reverse-mode autodiff engine
//! ([`tensor::Graph`]) over dense `f64` tensors.

pub mod analysis;
pub mod checks;
pub mod data;
mod error;
pub mod hyperconv;
pub mod nets;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use hyperconv::{CoordinateGrid, HyperConvLayer, HyperNetSpec};
pub use nets::{ArchitectureSpec, Backbone, ConvKind, Network};
pub use tensor::{Graph, Mode, NodeId, Precision, Tensor};
