use thiserror::Error;

/// Crate-wide error type. Numerical routines report the quantity that
/// tripped the check so callers can log actionable diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("rank-deficient system in {op}: pivot ratio {ratio:.3e} below {tol:.1e} ({rows}x{cols})")]
    RankDeficient {
        op: &'static str,
        ratio: f64,
        tol: f64,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },

    #[error("rejection sampling exceeded {cap} attempts in {op}")]
    RejectionCapExceeded { op: &'static str, cap: usize },

    #[error("target variance is zero; coefficient of determination undefined")]
    UndefinedVariance,

    #[error("empty input in {op}")]
    EmptyInput { op: &'static str },

    #[error("context exhausted: requested {requested} context pairs, block holds {available} candidates")]
    ContextExhausted { requested: usize, available: usize },

    #[error("split '{0}' contains no actions")]
    EmptySplit(String),

    #[error("every positive in the batch was skipped as rank-deficient")]
    AllPositivesSkipped,

    #[error("content class {class} has no examples in the probe fit half")]
    MissingClass { class: u32 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
