//! Multimodal imaging-genomics classifier built on a small reverse-mode tensor engine.
//!
//! Genomic (one-hot SNP), connectome (FNC lower triangle) and volumetric (gray-matter
//! density) inputs are encoded separately, then fused in two cross-modal multi-head
//! attention stages before a feed-forward classification head.

pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
mod kernels;
pub mod interpret;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

pub use model::{Batch, Dropouts, Forward, FusionKind, Modality, Model, ModelConfig};
pub use params::{Gradients, ModelParams, ParamKind, Session};
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
