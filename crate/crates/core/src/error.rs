use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    Network(String),

    #[error("invalid scenario: {}", .0.join("; "))]
    Scenario(Vec<String>),

    #[error("no route from {origin} to {destination}")]
    NoRoute { origin: String, destination: String },

    #[error("phase {target} out of range for intersection with {phases} phases")]
    PhaseOutOfRange { target: usize, phases: usize },

    #[error("signal plan: {0}")]
    SignalPlan(String),

    #[error("sensor readings do not match lane order: {0}")]
    LaneOrder(String),

    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),

    #[error("action {action} out of range for {actions} actions")]
    ActionOutOfRange { action: usize, actions: usize },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("q-table incompatible with network: {0}")]
    TableMismatch(String),

    #[error("network hash mismatch: tables built for {expected}, scenario is {found}")]
    NetworkHashMismatch { expected: String, found: String },

    #[error("misaligned streams: {0}")]
    Misaligned(String),

    #[error("calibration precondition: {0}")]
    CalibrationPrecondition(String),

    #[error("unknown {kind} '{name}' (expected one of: {})", .known.join(", "))]
    UnknownName {
        kind: &'static str,
        name: String,
        known: Vec<String>,
    },

    #[error("scenario hash mismatch: {0} vs {1}")]
    ScenarioMismatch(String, String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
