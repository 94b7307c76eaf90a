//! Analysis of adjacent-layer redundancy in multimodal transformer traces.
//!
//! Measures how much hidden states change between layers, bounds the
//! information a skipped layer could carry, checks those bounds on finite
//! instances, decomposes information across layers, and turns measured
//! profiles into late-entry / early-exit skip plans.

// Guards are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod infotheory;
pub mod oracle;
pub mod pid;
pub mod planner;
pub mod redundancy;
pub mod toy;
pub mod trace;

pub use error::{Error, Result};
pub use trace::{AttentionTrace, HiddenTrace, Modality};
