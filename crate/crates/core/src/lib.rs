//! Collectivity measures for rolling-window covariance and correlation
//! matrices of stock returns.
//!
//! The pipeline reads a price table ([`ingest`]), forms log returns and
//! sliding windows, builds covariance and correlation matrices per window
//! ([`matrices`]), removes the market mode by spectral decomposition
//! ([`spectral`]) and summarizes each window by absolute and relative
//! off-diagonal means with criterion labels ([`collectivity`]). The
//! [`regression`] module provides the partial-correlation baseline,
//! [`ensemble`] the correlated Wishart model, and [`phases`] the
//! risk-phase diagram aggregation.

pub mod cli;
pub mod collectivity;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod ingest;
pub mod matrices;
pub mod output;
pub mod phases;
pub mod pipeline;
pub mod regression;
pub mod spectral;

pub use error::{Error, Result};
pub use exec::Execution;
