//! Two-stage nucleus instance segmentation.
//!
//! Stage 1 (`tafe`) predicts a semantic-segmentation and an instance-boundary
//! probability map for an H&E image; `proposals` converts the pair into
//! instance proposals by boundary subtraction, connected components and
//! per-instance dilation. Stage 2 (`patching` + `refine`) re-segments each
//! proposal with a size-class-specific patch network and `refine::assemble`
//! pastes the results back into a final instance map. `metrics` carries the
//! evaluation suite (AJI, detection F1, Dice 1/2), `data` the IO /
//! normalization / augmentation / synthetic-data machinery, and `harness`
//! the training loops, inference, evaluation and sweeps behind the CLI.

pub mod core;
pub mod data;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod patching;
pub mod proposals;
pub mod refine;
pub mod tafe;

mod error;

pub use error::{Error, Result};
