use std::path::PathBuf;

/// Errors produced by the trapscan library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("tensor bounds error in layer `{layer_id}`: {reason}")]
    TensorBounds { layer_id: String, reason: String },

    #[error("non-finite entry in layer `{layer_id}` at flat index {index}")]
    NonFiniteEntry { layer_id: String, index: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("vector is not unit-normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("spectrum has zero trace")]
    ZeroTrace,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: u64, loss: f64 },

    #[error("layer `{0}` not found")]
    LayerNotFound(String),

    #[error("degenerate SVD: {0}")]
    DegenerateSvd(String),

    #[error("non-finite logits for probe {probe}")]
    NonFiniteLogits { probe: usize },

    #[error("trap selector {index} out of range ({available} traps available)")]
    TrapNotFound { index: usize, available: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by unreadable or invalid input files.
    pub fn is_ingestion(&self) -> bool {
        matches!(
            self,
            Error::MalformedManifest { .. }
                | Error::TensorBounds { .. }
                | Error::NonFiniteEntry { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
