use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state ({c},{e},{tr}) is outside the grid")]
    InvalidState { c: u8, e: u8, tr: u8 },

    #[error("state index {0} is outside 0..120")]
    InvalidStateIndex(usize),

    #[error("inconsistent profile: {}", .0.join("; "))]
    InconsistentProfile(Vec<String>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("stale log-probability at step {step}: stored {stored}, recomputed {recomputed}")]
    StaleLogProb {
        step: usize,
        stored: f64,
        recomputed: f64,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("replay mismatch for record {0}")]
    ReplayMismatch(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
