use thiserror::Error;

use crate::scores::bridge::BridgeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("time index {t} out of range [{min}, {max}]")]
    TimeRange { t: usize, min: usize, max: usize },

    #[error("block ({c}, {i}, {j}) has zero variance")]
    DegenerateBlock { c: usize, i: usize, j: usize },

    #[error("point is off the manifold at block ({c}, {i}, {j}): {detail}")]
    OffManifold {
        c: usize,
        i: usize,
        j: usize,
        detail: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error(transparent)]
    Bridge(#[from] BridgeError),

    #[error("score evaluation failed at step {t}: {source}")]
    ScoreAtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
