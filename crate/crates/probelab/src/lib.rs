//! File formats, the sweep orchestrator and the command line around
//! [`probelab_core`].

pub mod analyze;
pub mod cli;
pub mod error;
pub mod logit;
pub mod manifest;
pub mod report;
pub mod steer;
pub mod store;
pub mod sweep;
pub mod toy;

pub use error::{Error, Result};
pub use probelab_core as core;
