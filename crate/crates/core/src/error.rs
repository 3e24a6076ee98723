use thiserror::Error;

use crate::hybrid_time::HybridTimePoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hybrid time domain: {0}")]
    InvalidDomain(String),

    #[error("point ({}, {}) is outside the hybrid time domain", .0.t, .0.j)]
    OutsideDomain(HybridTimePoint),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parameter out of range: {0}")]
    Parameter(String),

    #[error("non-finite value at (t = {t}, j = {j}): {what}")]
    NonFinite { t: f64, j: usize, what: String },

    #[error("event location failed: {0}")]
    EventLocation(String),

    #[error("structural assumption violated at (t = {t}, j = {j}): {what}")]
    Assumption { t: f64, j: usize, what: String },

    #[error("excitation window: {0}")]
    Window(String),

    #[error("inconsistent bound inputs: {0}")]
    Bounds(String),

    #[error("simulation diverged: {0}")]
    Divergence(String),

    #[error("jump chattering: jumps at hybrid times {first:?} and {second:?} are closer than {min_separation}")]
    Chattering {
        first: HybridTimePoint,
        second: HybridTimePoint,
        min_separation: f64,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
