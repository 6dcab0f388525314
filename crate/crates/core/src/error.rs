use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("catalog index {index} out of range for trace of {n_samples} samples")]
    CatalogOutOfRange { index: u64, n_samples: u64 },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate window: channel {channel} has zero variance")]
    DegenerateWindow { channel: usize },

    #[error("infeasible request: asked for {requested} windows, at most {achievable} available")]
    Infeasible { requested: usize, achievable: usize },

    #[error("cannot balance sample set: {0}")]
    Unbalanced(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph already consumed by backward")]
    GraphConsumed,

    #[error("asymmetric spectrum: imaginary residue {0:e}")]
    AsymmetricSpectrum(f64),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at iteration {iteration}: |loss| = {loss:e}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::CatalogOutOfRange { .. } => "catalog_out_of_range",
            Error::InvalidTrace(_) => "invalid_trace",
            Error::InvalidCatalog(_) => "invalid_catalog",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DegenerateWindow { .. } => "degenerate_window",
            Error::Infeasible { .. } => "infeasible",
            Error::Unbalanced(_) => "unbalanced",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::GraphConsumed => "graph_consumed",
            Error::AsymmetricSpectrum(_) => "asymmetric_spectrum",
            Error::MissingParam(_) => "missing_param",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Empty(_) => "empty",
        }
    }
}
