use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("overlapping part masks not explained by an inclusion relation: {0}")]
    Overlap(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("invalid split ratios: {0}")]
    Ratio(String),
    #[error("no relevant part has a positive score")]
    AllZero,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("sample ids differ between decision lists: {0}")]
    IdMismatch(String),
    #[error("record has no parts to crop")]
    EmptyRecord,
    #[error("config error: {0}")]
    Config(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Short machine-readable kind tag used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Overlap(_) => "overlap",
            Error::VocabMismatch(_) => "vocab_mismatch",
            Error::EmptyInput(_) => "empty_input",
            Error::Dimension(_) => "dimension",
            Error::Spec(_) => "spec",
            Error::Ratio(_) => "ratio",
            Error::AllZero => "all_zero",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Data(_) => "data",
            Error::IdMismatch(_) => "id_mismatch",
            Error::EmptyRecord => "empty_record",
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
