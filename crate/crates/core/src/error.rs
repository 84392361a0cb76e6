use thiserror::Error;

/// Everything that can go wrong while loading, validating, fitting or simulating.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("ragged panel: area {area} has {found} time points, expected {expected}")]
    Ragged {
        area: String,
        found: usize,
        expected: usize,
    },

    #[error("negative {what} {value} at area {area}, time {time}")]
    Negative {
        what: &'static str,
        area: String,
        time: i64,
        value: i64,
    },

    #[error("duplicate row for area {area}, time {time}")]
    Duplicate { area: String, time: i64 },

    #[error("area {area} in {source_name} is not present in the counts")]
    UnknownArea { area: String, source_name: String },

    #[error("area {area} has no {what}")]
    MissingArea { area: String, what: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid spatial structure: {0}")]
    Spatial(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("sampler failure: {0}")]
    Sampler(String),
}

impl Error {
    /// Short machine-readable tag, used for the CLI's JSON diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Json(_) => "json",
            Error::Ragged { .. } => "ragged",
            Error::Negative { .. } => "negative_value",
            Error::Duplicate { .. } => "duplicate_row",
            Error::UnknownArea { .. } => "unknown_area",
            Error::MissingArea { .. } => "missing_area",
            Error::Shape(_) => "shape",
            Error::Spatial(_) => "spatial",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Domain(_) => "domain",
            Error::MissingData(_) => "missing_data",
            Error::Sampler(_) => "sampler",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
