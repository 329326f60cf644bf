use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed parameter index: {0}")]
    Index(String),
    #[error("parameter blob size mismatch: expected {expected} bytes, found {found}")]
    BlobSize { expected: usize, found: usize },
    #[error("parameter `{0}` missing or has a different shape")]
    ParamMismatch(String),
}
