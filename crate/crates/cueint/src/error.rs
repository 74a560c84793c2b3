use thiserror::Error;

#[derive(Debug, Error)]
pub enum CueError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sample id mismatch at row {row}: '{left}' vs '{right}'")]
    IdMismatch { row: usize, left: String, right: String },
    #[error(transparent)]
    Core(#[from] shiftbench_core::CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CueError>;
