//! Minimal reverse-mode differentiation over `f64` tensors.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] walks the
//! record in reverse from a scalar seed. Hard selections (top-k masks,
//! nearest-code lookup) are computed outside the graph on plain values and
//! enter as constants or index lists, so gradient only crosses them through
//! explicit [`Graph::straight_through`] or stop-gradient compositions.

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{gradient_check, GradCheck};
pub use graph::{Decisions, Gradients, Graph, Var};
pub use optim::{Adam, AdamState};
pub use params::{ParamId, ParamStore};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("backward seed must be scalar, got shape {shape:?}")]
    NonScalarSeed { shape: Vec<usize> },
    #[error("non-finite value at node {node} ({op}{})", label.as_ref().map(|l| format!(", {l}")).unwrap_or_default())]
    NumericFailure {
        node: usize,
        op: &'static str,
        label: Option<String>,
    },
    #[error("gradient check needs eps > 0, got {0}")]
    BadStep(f64),
}
