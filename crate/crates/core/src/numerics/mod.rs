//! Tensor algebra, reverse-mode autodiff and the Adam optimizer.

mod attention;
mod graph;
mod layout;
pub mod kernels;
mod optim;
mod params;
pub mod rng;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{GradBuffer, ParamId, ParamStore, Session};
pub use rng::SplitMix64;
pub use tensor::{Element, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("attention row {row} has no allowed key")]
    AllMaskedRow { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("{0}")]
    InvalidArgument(String),
}
