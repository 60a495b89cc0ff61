use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty set: a bag must contain at least one instance")]
    EmptySet,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("inclusion criteria not met: {0}")]
    InclusionCriteria(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("{path}:{line}: {msg}")]
    Record {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
