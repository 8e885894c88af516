//! Cooperative multi-AP OFDM sensing: echo synthesis, subspace fusion,
//! position estimation and Cramér–Rao bounds.

pub mod crlb;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod geometry;
pub mod rng;
pub mod scenario;
pub mod signal;
pub mod subspace;

pub use error::{Error, Result};
