use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("filter '{filter}' removed every record")]
    EmptyAfterFilter { filter: String },
    #[error("split policy infeasible: {0}")]
    SplitInfeasible(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Core(#[from] shiftbench_core::CoreError),
    #[error(transparent)]
    Cue(#[from] shiftbench_cueint::CueError),
    #[error(transparent)]
    DepthColor(#[from] shiftbench_depthcolor::DepthColorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
