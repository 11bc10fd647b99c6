use thiserror::Error;

use crate::schedule::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {}", format_violations(.0))]
    InvalidSchedule(Vec<Violation>),

    #[error("invalid noise range: sigma_min={sigma_min}, sigma_max={sigma_max}")]
    InvalidNoiseSpec { sigma_min: f64, sigma_max: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("step must go to a lower noise level (from {from}, to {to})")]
    NonDecreasingStep { from: f64, to: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("index {index} is not an interior index of a {steps}-step schedule")]
    IndexOutOfRange { index: usize, steps: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Json(_) | Error::NoConvergence { .. })
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
