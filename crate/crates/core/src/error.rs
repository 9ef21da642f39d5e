use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown concept id {0}")]
    UnknownConcept(u32),

    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("gradient graph: {0}")]
    Graph(String),

    #[error("non-finite value during {stage} (seed {seed}, step {step})")]
    NonFinite { stage: &'static str, seed: u64, step: usize },

    #[error("zero-norm vector cannot be normalized")]
    ZeroNorm,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
