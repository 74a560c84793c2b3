use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid network: {0}")]
    Network(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: u64, what: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
