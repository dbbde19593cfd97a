//! Error type shared by every engine module.

use thiserror::Error;

/// Failures reported by the lattice engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "tilt error at step {step}, state {state}: |theta|*sqrt(delta) = {magnitude} exceeds 1"
    )]
    Tilt {
        step: usize,
        state: usize,
        magnitude: f64,
    },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("shape mismatch: expected {expected} values, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error(
        "step size too large: C_y*delta = {product} must be below 1; increase the number of steps"
    )]
    StepSize { product: f64 },

    #[error(
        "Picard iteration did not converge at step {step}, state {state} (residual {residual:e})"
    )]
    NonConvergence {
        step: usize,
        state: usize,
        residual: f64,
    },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("scenario infeasible at step {step}, state {state}: conjugate is +inf")]
    ScenarioInfeasible { step: usize, state: usize },

    #[error("anchor {anchor}: {source}")]
    Anchor { anchor: usize, source: Box<Error> },

    #[error("quadrature node a = {node}: {source}")]
    QuadratureNode { node: f64, source: Box<Error> },
}

impl Error {
    /// True when the failure stems from invalid input rather than from numerics.
    pub fn is_configuration(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Layout(_)
            | Error::Index(_)
            | Error::Shape { .. }
            | Error::Capability(_) => true,
            Error::Anchor { source, .. } | Error::QuadratureNode { source, .. } => {
                source.is_configuration()
            }
            _ => false,
        }
    }

    pub(crate) fn at_anchor(self, anchor: usize) -> Error {
        Error::Anchor {
            anchor,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
