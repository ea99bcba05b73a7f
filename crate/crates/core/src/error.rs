use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NtkError>;

/// Where a hidden-energy degeneracy happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnergySite {
    pub layer: Option<usize>,
    pub sample: Option<usize>,
}

impl fmt::Display for EnergySite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.sample) {
            (Some(l), Some(i)) => write!(f, " at layer {l}, sample {i}"),
            (Some(l), None) => write!(f, " at layer {l}"),
            (None, Some(i)) => write!(f, " at sample {i}"),
            (None, None) => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum NtkError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// All selected hidden units are closed, so the normalization energy vanishes.
    #[error("degenerate hidden energy S = {energy:e}{site}")]
    DegenerateEnergy { energy: f64, site: EnergySite },

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("divergence detected at step {step} (loss {loss:e})")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NtkError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NtkError::InvalidInput(msg.into())
    }

    pub(crate) fn energy(energy: f64) -> Self {
        NtkError::DegenerateEnergy {
            energy,
            site: EnergySite::default(),
        }
    }

    /// Attaches a layer index to a [`NtkError::DegenerateEnergy`]; other errors pass through.
    pub fn at_layer(self, layer: usize) -> Self {
        match self {
            NtkError::DegenerateEnergy { energy, site } => NtkError::DegenerateEnergy {
                energy,
                site: EnergySite {
                    layer: Some(layer),
                    ..site
                },
            },
            other => other,
        }
    }

    /// Attaches a sample index to a [`NtkError::DegenerateEnergy`]; other errors pass through.
    pub fn at_sample(self, sample: usize) -> Self {
        match self {
            NtkError::DegenerateEnergy { energy, site } => NtkError::DegenerateEnergy {
                energy,
                site: EnergySite {
                    sample: Some(sample),
                    ..site
                },
            },
            other => other,
        }
    }
}
