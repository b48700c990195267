use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Validation and config errors describe bad inputs; compute errors are
/// attributed to the module that failed so a run report can say where.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{module}: {message}")]
    Compute {
        module: &'static str,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn compute(module: &'static str, message: impl Into<String>) -> Self {
        Error::Compute {
            module,
            message: message.into(),
        }
    }

    /// True for failures caused by the inputs or the config rather than by a
    /// computation. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Csv { .. } | Error::Validation(_) | Error::Config(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
