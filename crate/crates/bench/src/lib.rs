//! Shared fixtures for the criterion benchmarks.

use mvcl_core::data::SynthConfig;
use mvcl_core::model::TaskKind;
use mvcl_core::{ModelConfig, SeededRng, Tensor};

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, 1.0)).expect("finite draw")
}

/// Desk-sized regression model over the default synthetic shapes.
pub fn desk_config() -> ModelConfig {
    ModelConfig::desk(SynthConfig::default().shapes, TaskKind::Regression, 0)
}
