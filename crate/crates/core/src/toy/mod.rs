//! Synthetic oracle: planted Gaussian tasks, a tiny deterministic mock VLM,
//! and a reference best-linear-accuracy search.

mod oracle;
mod plant;
mod vlm;

pub use oracle::bruteforce_best_linear;
pub use plant::{planted_token_logits, random_unit, PlantSpec, SplitCounts};
pub use vlm::{Readout, ToyForward, ToyVlm, ToyVlmSpec};
