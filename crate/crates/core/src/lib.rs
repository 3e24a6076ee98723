//! Hybrid gradient parameter estimation under hybrid persistence of excitation.

pub mod bounds;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod hybrid_time;
pub mod linalg;
pub mod pe;
pub mod scenarios;

pub use error::{Error, Result};
pub use hybrid_time::{HybridArc, HybridTimeDomain, HybridTimePoint};
