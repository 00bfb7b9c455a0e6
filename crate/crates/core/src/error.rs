use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error at `{token}`: {reason}")]
    Parse { token: String, reason: String },
    #[error("edge {0}->{1} has no alive operation")]
    DeadEdge(usize, usize),
    #[error("probe window is empty for edge {0}->{1}")]
    EmptyWindow(usize, usize),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("genotype error: {0}")]
    Genotype(String),
    #[error("metric undefined: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
