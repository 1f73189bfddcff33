use std::path::PathBuf;

use kpdet_core::CoreError;
use kpdet_nn::NnError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Core(CoreError::Nn(e))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::File {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::File { .. } | CliError::Json { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                CoreError::Numeric(_)
                | CoreError::Singular(_)
                | CoreError::MappedToInfinity { .. }
                | CoreError::DegenerateWarp(_) => EXIT_NUMERIC,
                CoreError::Nn(NnError::NonScalarLoss(_)) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
        }
    }
}
