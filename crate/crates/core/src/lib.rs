//! Pruning-at-initialization laboratory: a small f32 tensor/autodiff core,
//! masked networks, optimizers, four pruning criteria and an experiment
//! harness that compares them under equal training budgets.

pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod prune;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
