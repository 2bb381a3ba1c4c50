use thiserror::Error;

/// Everything that can go wrong between raw sensor logs and a steering plan.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singular design matrix; collinear columns: {}", .columns.join(", "))]
    Singular { columns: Vec<String> },
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("missing artifact `{artifact}`; run `{stage}` first")]
    Dependency { artifact: String, stage: String },
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, machine-readable category used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::Sizing(_) => "sizing",
            Error::Shape(_) => "shape",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Domain(_) => "domain",
            Error::Singular { .. } => "singular",
            Error::Pipeline(_) => "pipeline",
            Error::Dependency { .. } => "dependency",
            Error::Comparison(_) => "comparison",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) => 2,
            Error::Dependency { .. } => 3,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
