use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Variants map one-to-one onto the
/// error kinds named by the stage contracts so callers can match on them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config syntax error: {0}")]
    ConfigSyntax(String),
    #[error("config is missing required key `{0}`")]
    ConfigMissing(&'static str),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),

    #[error("required input file not found: {}", .0.display())]
    IngestMissingFile(PathBuf),
    #[error("{}: required column `{column}` is absent", .file.display())]
    IngestSchema { file: PathBuf, column: String },
    #[error("cohort is empty after applying filters")]
    EmptyCohort,

    #[error("patient-level split needs at least 3 subjects, found {0}")]
    SplitTooSmall(usize),
    #[error("split `{0}` would be empty at the configured ratios")]
    SplitEmpty(&'static str),

    #[error("unmapped outcome value `{value}` for dataset {dataset}")]
    LabelUnknownOutcome { dataset: String, value: String },
    #[error("cannot fit discretisation grid: {0}")]
    GridDegenerate(String),
    #[error("duration {duration} lies outside the grid range [0, {horizon}]")]
    GridOutOfRange { duration: f64, horizon: f64 },

    #[error("missingness filter removed every dynamic feature")]
    FilterEmpty,
    #[error("feature `{0}` is not present in the windowed data")]
    FilterSchema(String),

    #[error("radiology embeddings are misaligned: {0}")]
    RadiologyMisaligned(String),

    #[error("tensor shape mismatch: {0}")]
    TensorShape(String),
    #[error("value {0} does not fit in the target dtype")]
    SerializeOverflow(f64),
    #[error("malformed npy file: {0}")]
    NpyFormat(String),

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {}: {source}", .path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
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

    /// Short machine-friendly name of the error kind, used in CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ConfigSyntax(_) => "ConfigSyntax",
            Error::ConfigMissing(_) => "ConfigMissing",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::SpecInvalid(_) => "SpecInvalid",
            Error::IngestMissingFile(_) => "IngestMissingFile",
            Error::IngestSchema { .. } => "IngestSchema",
            Error::EmptyCohort => "EmptyCohort",
            Error::SplitTooSmall(_) => "SplitTooSmall",
            Error::SplitEmpty(_) => "SplitEmpty",
            Error::LabelUnknownOutcome { .. } => "LabelUnknownOutcome",
            Error::GridDegenerate(_) => "GridDegenerate",
            Error::GridOutOfRange { .. } => "GridOutOfRange",
            Error::FilterEmpty => "FilterEmpty",
            Error::FilterSchema(_) => "FilterSchema",
            Error::RadiologyMisaligned(_) => "RadiologyMisaligned",
            Error::TensorShape(_) => "TensorShape",
            Error::SerializeOverflow(_) => "SerializeOverflow",
            Error::NpyFormat(_) => "NpyFormat",
            Error::Io { .. } => "Io",
            Error::Csv { .. } => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
