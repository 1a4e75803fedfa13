use attnpyr_core::Error as CoreError;
use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_GEOMETRY: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("geometry: {0}")]
    Geometry(CoreError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Geometry(_) => EXIT_GEOMETRY,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_FAILURE,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Checkpoint(m) => CliError::Checkpoint(m),
            e if e.is_geometry() => CliError::Geometry(e),
            e => CliError::Core(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
