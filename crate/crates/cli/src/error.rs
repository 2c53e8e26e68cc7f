use mmlp_core::data::DataError;
use mmlp_core::interpret::InterpretError;
use mmlp_core::mace::MaceError;
use mmlp_core::metrics::MetricsError;
use mmlp_core::trading::TradingError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fit(#[from] MaceError),
    #[error(transparent)]
    Trading(#[from] TradingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error("model artifact does not match the data: {0}")]
    Artifact(String),
    #[error("audit failed: {0}")]
    Audit(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub mod exit {
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const DATA: u8 = 4;
    pub const FIT: u8 = 5;
    pub const ARTIFACT: u8 = 6;
    pub const AUDIT: u8 = 7;
    pub const EVALUATION: u8 = 8;
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => exit::CONFIG,
            Self::Io { .. } => exit::IO,
            Self::Data(DataError::Io { .. }) => exit::IO,
            Self::Data(_) => exit::DATA,
            Self::Fit(MaceError::Io { .. }) => exit::IO,
            Self::Fit(MaceError::Data(DataError::Io { .. })) => exit::IO,
            Self::Fit(MaceError::Config(_)) => exit::CONFIG,
            Self::Fit(MaceError::Data(_)) => exit::DATA,
            Self::Fit(MaceError::FormatVersion { .. } | MaceError::Json(_)) => exit::ARTIFACT,
            Self::Fit(_) => exit::FIT,
            Self::Trading(TradingError::Config(_)) => exit::CONFIG,
            Self::Trading(TradingError::Io { .. }) => exit::IO,
            Self::Metrics(MetricsError::Io(_)) | Self::Interpret(InterpretError::Io(_)) => exit::IO,
            Self::Trading(_) | Self::Metrics(_) | Self::Interpret(_) => exit::EVALUATION,
            Self::Artifact(_) => exit::ARTIFACT,
            Self::Audit(_) => exit::AUDIT,
        }
    }
}
