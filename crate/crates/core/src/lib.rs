//! Collaborative-attention image restoration.
//!
//! The network couples a patch-wise non-local attention branch with a
//! multi-scale local channel-attention branch and fuses them with learned
//! per-channel softmax weights. Everything needed to train and evaluate it at
//! desk scale lives here: a small reverse-mode tensor library, patch
//! unfold/fold, the attention blocks, degradation generators, PSNR/SSIM,
//! Adam training with checkpoints, and the plain-text run configuration.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod degradation;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod image_io;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod patch;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use patch::{PatchGeometry, PatchSet};
pub use tensor::{ParamTensor, Real, Tensor};
