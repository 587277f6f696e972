//! Numeric core for layerwise linear probing of vision-language model
//! activations.
//!
//! Everything in this crate is pure and allocation-only: pooling kernels,
//! chance-corrected metrics, the AdamW probe trainer and its protocol, weight
//! analyses, steering-vector composition, sparse L1 logistic regression over
//! logits, and a synthetic oracle (planted Gaussian tasks plus a tiny
//! deterministic mock VLM). File formats, manifests, sweeps and the CLI live in
//! the `probelab` crate.
#![no_std]
#![deny(unsafe_code)]
// Index loops over row-major buffers read better than zipped iterators here.
#![allow(clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adamw;
pub mod analysis;
pub mod category;
mod error;
pub mod metrics;
pub mod pooling;
pub mod probe;
pub mod sparse;
pub mod steering;
pub mod toy;
pub mod types;

pub use error::{Error, Result};
