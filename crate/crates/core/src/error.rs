use alloc::string::String;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("frozen representer was modified: {0}")]
    FrozenMutation(String),
    #[error("subject leakage: {0}")]
    Leakage(String),
    #[error("invalid graph use: {0}")]
    Graph(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
