use alloc::string::String;
use alloc::vec::Vec;

use crate::topology::Violation;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid network: {}", join(.0))]
    Invalid(Vec<Violation>),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("duration must be a positive multiple of the simulation step, got {0} ms")]
    Duration(f64),

    #[error("input neuron {neuron} spikes at step {step}, outside the episode of {steps} steps")]
    InputOutOfRange { neuron: usize, step: u32, steps: u32 },

    #[error("spike times must be strictly increasing (position {0})")]
    UnorderedSpikes(usize),

    #[error("singular system in layer {layer}: {detail}")]
    Singular { layer: usize, detail: String },

    #[error("layer {0} is not recurrent")]
    NotRecurrent(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("{0}")]
    Config(String),
}

impl Error {
    /// Numeric failures that make a single training sample unusable but leave
    /// the run healthy.
    pub fn is_degenerate_sample(&self) -> bool {
        matches!(self, Error::Singular { .. } | Error::NonFinite(_))
    }
}

fn join(violations: &[Violation]) -> String {
    let mut out = String::new();
    for (i, v) in violations.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        out.push_str(&alloc::format!("{v}"));
    }
    out
}
