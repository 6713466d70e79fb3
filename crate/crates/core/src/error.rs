use std::fmt;

use crate::tensor::TensorShape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a design cannot run on the configured hardware.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Infeasibility {
    /// A weight tile does not fit one ping-pong bank.
    TileOverflow {
        layer: Option<usize>,
        tile_bits: u64,
        bank_bits: u64,
    },
    /// Live feature maps exceed the on-chip feature-map buffer.
    Residency { peak_bits: u64, capacity_bits: u64 },
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Infeasibility::TileOverflow {
                layer,
                tile_bits,
                bank_bits,
            } => {
                write!(f, "weight tile ")?;
                if let Some(l) = layer {
                    write!(f, "of layer {l} ")?;
                }
                write!(f, "needs {tile_bits} bits but a bank holds {bank_bits}")
            }
            Infeasibility::Residency {
                peak_bits,
                capacity_bits,
            } => write!(
                f,
                "feature maps need {peak_bits} bits but the buffer holds {capacity_bits}"
            ),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid layer {index}: {reason}")]
    Layer { index: usize, reason: String },

    #[error("shape chain broken at layer {index}: expected input {expected}, found {found}")]
    ShapeChain {
        index: usize,
        expected: TensorShape,
        found: TensorShape,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite value in tensor")]
    NonFinite,

    #[error("negative variance {value} at channel {channel}")]
    NegativeVariance { channel: usize, value: f64 },

    #[error("tile plan: {0}")]
    TilePlan(String),

    #[error("missing weights for layer {0}")]
    MissingWeights(usize),

    #[error("weights do not match layer {index}: {reason}")]
    WeightMismatch { index: usize, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("infeasible design: {0}")]
    Infeasible(Infeasibility),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn layer(index: usize, reason: impl Into<String>) -> Self {
        Error::Layer {
            index,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
