use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("backend unavailable: {0}")]
    Backend(String),

    #[error("image too small for {scales} MS-SSIM scale(s): {detail}")]
    Scale { scales: usize, detail: String },

    #[error("non-finite value: {0}")]
    Numerical(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("integrity check failed for {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor op failed: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Range(_) => "range",
            Error::Backend(_) => "backend",
            Error::Scale { .. } => "scale",
            Error::Numerical(_) => "numerical",
            Error::EmptyDataset => "empty_dataset",
            Error::Length(_) => "length",
            Error::Parameter(_) => "parameter",
            Error::Config(_) => "config",
            Error::Integrity { .. } => "integrity",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Format(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
