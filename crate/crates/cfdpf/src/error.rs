//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Coordinated-turn transition with zero speed: the turn rate is undefined.
    #[error("degenerate turn rate: speed is zero")]
    DegenerateTurnRate,

    /// Bearing requested for a target sitting exactly on the sensor.
    #[error("undefined bearing: target coincides with sensor {node}")]
    UndefinedBearing { node: usize },

    /// Every particle weight underflowed to zero during a measurement update.
    #[error("filter divergence at node {node:?}, step {step}: total weight underflow")]
    FilterDivergence { node: Option<usize>, step: usize },

    /// Every fusion-filter weight underflowed to zero.
    #[error("fusion divergence at node {node}, step {step}: total weight underflow")]
    FusionDivergence { node: usize, step: usize },

    /// A covariance/information matrix could not be factorized even after
    /// regularization.
    #[error("matrix not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("could not generate connected graph after {attempts} attempts")]
    DisconnectedGraph { attempts: usize },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    /// Modified fusion filter asked to fuse steps whose local summaries were
    /// never buffered.
    #[error("insufficient local summary buffer: missing step {step}")]
    InsufficientHistory { step: usize },

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn not_pd(context: impl Into<String>) -> Self {
        Error::NotPositiveDefinite {
            context: context.into(),
        }
    }

    pub fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
