use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Data {
        path: PathBuf,
        #[source]
        source: stable_fi_core::Error,
    },
    #[error(transparent)]
    Core(#[from] stable_fi_core::Error),
    #[error("schema hash mismatch: model has {model}, dataset has {dataset}")]
    SchemaHash { model: String, dataset: String },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for user or configuration errors, 2 for broken
    /// internal invariants.
    pub fn exit_code(&self) -> i32 {
        use stable_fi_core::Error as Core;
        match self {
            Error::Core(Core::ShapeMismatch(_) | Core::GroupMismatch { .. }) => 2,
            _ => 1,
        }
    }
}
