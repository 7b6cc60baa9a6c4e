//! Multi-task federated learning with a shared encoder.
//!
//! Each task has its own group of clients and its own decoder head. All tasks
//! share an encoder architecture, and a server-side global encoder `g` pulls
//! the per-task encoders together through a proximity penalty whose weight
//! grows over the rounds.

pub mod autodiff;
pub mod client;
pub mod convergence;
pub mod error;
pub mod metrics;
pub mod model;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod rng;
pub mod server;
pub mod taskgen;

pub use error::{Error, Result};
