use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside the valid range {lo}..={hi}")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("condition vector required (condition_dim = {0})")]
    MissingCondition(usize),

    #[error("unexpected condition vector for an unconditional model")]
    UnexpectedCondition,

    #[error("invalid model architecture: {0}")]
    InvalidArchitecture(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("alpha_bar underflow at t = {0}")]
    AlphaBarUnderflow(usize),

    #[error("invalid trajectory span: from {from} to {to}")]
    InvalidSpan { from: usize, to: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("evaluation requires both member and hold-out samples")]
    SingleClass,

    #[error("no scores to evaluate")]
    EmptyScores,

    #[error("cannot aggregate reports for different attacks: {0} vs {1}")]
    MixedAttacks(String, String),

    #[error("attack-train and evaluation sets overlap on sample {0}")]
    SplitOverlap(u64),

    #[error("empty synthetic set")]
    EmptySyntheticSet,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("hold-out sample {0} reached the optimizer")]
    HoldoutLeak(u64),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
