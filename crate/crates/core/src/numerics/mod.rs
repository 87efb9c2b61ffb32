//! Deterministic differentiable computation: dense `f64` tensors, a
//! reverse-mode tape, named parameter storage and a finite-difference
//! gradient checker.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_perturbed, grad_check_store, grad_check_store_perturbed, relative_error,
    GradReport, ParamCheck,
};
pub use params::{has_prefix, Graph, ParamStore, Trainable};
pub use rng::{RngState, SeededRng};
pub use tape::{cosine_sim, Gradients, Tape, Var};
pub use tensor::Tensor;

