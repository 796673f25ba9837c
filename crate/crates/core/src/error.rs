use std::path::PathBuf;

/// Errors produced by the pipeline.
///
/// The CLI maps these onto its stable exit codes: config/argument problems,
/// missing upstream artifacts, and numerical divergence each get their own
/// code; everything else is a generic I/O failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("numerical divergence at step {step} in {context}")]
    Divergence { step: usize, context: String },

    #[error("degenerate mixture component {component}: responsibility mass below 1e-8 after reseed")]
    DegenerateCluster { component: usize },

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("missing artifact: {}", path.display())]
    MissingArtifact { path: PathBuf },

    #[error("empty pool: {0}")]
    EmptyPool(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
