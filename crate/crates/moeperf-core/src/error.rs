use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates an invariant. The message names the offending field.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An operation argument is out of its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
