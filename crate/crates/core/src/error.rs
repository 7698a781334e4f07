use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape has a zero extent or its element count overflows `usize`.
    #[error("size error: {0}")]
    Size(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// An extent violates the valid-tiling constraint of the network.
    #[error("tiling error: {0}")]
    Tiling(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("config error: {0}")]
    Config(String),

    /// A tape was replayed against a model whose parameters changed since the
    /// forward pass that produced it.
    #[error("state error: {0}")]
    State(String),

    /// Pool indices pointing outside their own window.
    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("count error: {0}")]
    Count(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
