//! Federated identification of discrete-time linear state-space models.
//!
//! Workers fit local models by prediction error minimization; a server
//! aligns their state bases with similarity transforms before averaging, so
//! that equivalent realizations are not mixed entry by entry.

pub mod alignment;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod results;
pub mod rng;
pub mod ssm;
pub mod sysid;

pub use error::{Error, Result};
pub use ssm::{AlignmentTransform, StateSpaceModel};
pub use sysid::{PemSettings, TimeSeriesDataset};
