use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameter lies outside the domain (distance {distance:.3e})")]
    OutsideDomain { distance: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("batch of {batch} samples exceeds memory capacity {capacity}")]
    CapacityExceeded { batch: usize, capacity: usize },

    #[error("stream of client {client} exhausted at round {round}")]
    StreamExhausted { client: usize, round: usize },

    #[error("total sample weight is zero ({0})")]
    ZeroMass(String),

    #[error("client memory is empty")]
    EmptyMemory,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("accuracy is undefined for the squared loss")]
    AccuracyUndefined,

    #[error("minimizer did not converge after {iterations} iterations (best value {best_value})")]
    NotConverged {
        iterations: usize,
        best_value: f64,
        best_point: Vec<f64>,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}
