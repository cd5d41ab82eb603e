use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input file not found: {0}")]
    MissingFile(PathBuf),

    #[error("schema mismatch in column `{column}` at row {row}")]
    SchemaMismatch { column: String, row: usize },

    #[error("unknown level `{label}` at row {row}")]
    InvalidLevel { label: String, row: usize },

    #[error("non-positive inter-syllable interval at row {row}")]
    NonPositiveIsi { row: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("concentration parameters must be positive and finite")]
    NonPositiveConcentration,

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("all component weights underflowed for record {record}")]
    AllWeightsUnderflow { record: usize },

    #[error("need at least {required} posterior draws, have {available}")]
    InsufficientDraws { required: usize, available: usize },

    #[error("trace contains no draws")]
    EmptyTrace,

    #[error("unknown scenario `{0}` (expected A, B or C)")]
    UnknownScenario(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid generative spec: {0}")]
    InvalidSpec(String),

    #[error("checkpoint does not match the run: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::SchemaMismatch { .. } => "SchemaMismatch",
            Error::InvalidLevel { .. } => "InvalidLevel",
            Error::NonPositiveIsi { .. } => "NonPositiveIsi",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::NonPositiveConcentration => "NonPositiveConcentration",
            Error::Domain(_) => "DomainError",
            Error::AllWeightsUnderflow { .. } => "AllWeightsUnderflow",
            Error::InsufficientDraws { .. } => "InsufficientDraws",
            Error::EmptyTrace => "EmptyTrace",
            Error::UnknownScenario(_) => "UnknownScenario",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::CheckpointMismatch(_) => "CheckpointMismatch",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
