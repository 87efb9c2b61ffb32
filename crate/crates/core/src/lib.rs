//! Multi-view contrastive representation learning for multimodal sentiment
//! analysis.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense `f64` tensors, a reverse-mode tape and a
//!   finite-difference gradient checker.
//! - [`encoders`]: per-modality Transformer encoders and projection heads.
//! - [`crossmodal`]: the two-level cross-modal Transformer producing six
//!   refined representations, and their self-attention fusion.
//! - [`losses`]: supervised and self-supervised contrastive objectives and the
//!   classifier losses.
//! - [`data`]: synthetic dataset generation, the `MVCL1` feature file format
//!   and batching.
//! - [`pipeline`]: the staged trainer, parameter freezing and `MVCK1`
//!   checkpoints.
//! - [`metrics`]: Acc-2, F1, MAE, Pearson correlation and representation
//!   diagnostics.

pub mod crossmodal;
pub mod data;
pub mod encoders;
mod error;
pub mod gradcheck_suite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
pub use model::{ModalityId, ModelConfig, MvclModel};
pub use numerics::{Graph, ParamStore, RngState, SeededRng, Tape, Tensor, Trainable, Var};
