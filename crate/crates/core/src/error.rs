use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: index {index} out of range (bound {bound})")]
    Index { op: &'static str, index: usize, bound: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metrics: {0}")]
    UndefinedMetrics(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
