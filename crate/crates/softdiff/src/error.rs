use std::path::PathBuf;

/// Process exit codes.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const FAIL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Schema violation or an invalid value; `field` is a JSON path such as
    /// `bodies[0].mesh.beam.resolution`.
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("numerical failure: {0}")]
    Numerical(#[from] softdiff_core::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { field: field.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Io { .. } | Self::File { .. } => exit::CONFIG,
            Self::Numerical(_) => exit::NUMERICAL,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
