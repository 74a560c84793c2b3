use thiserror::Error;

#[derive(Debug, Error)]
pub enum DepthColorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{remaining} null pixels remain after {iterations} fill iterations")]
    FillIncomplete { remaining: usize, iterations: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DepthColorError>;
