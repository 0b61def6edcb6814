use thiserror::Error;

#[derive(Debug, Error)]
pub enum CfdtError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("layout generation failed: {0}")]
    Generation(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("incomplete run: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Nn(#[from] cfdt_nn::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CfdtError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CfdtError + '_ {
    move |source| CfdtError::Io {
        path: path.display().to_string(),
        source,
    }
}
