use thiserror::Error;

/// Errors produced anywhere in the adapter pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("element count mismatch: tensor has {actual} elements, target shape needs {expected}")]
    ElementCountMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("length {len} is not a power of two")]
    NotPowerOfTwo { len: usize },

    #[error("requested {k} singular triplets from a {rows}x{cols} matrix")]
    RankTooLarge { k: usize, rows: usize, cols: usize },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("infeasible config: {0}")]
    Infeasible(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("unknown initialization scheme `{0}`")]
    UnknownInitScheme(String),

    #[error("invalid projection: {0}")]
    InvalidProjection(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (newest supported is {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
