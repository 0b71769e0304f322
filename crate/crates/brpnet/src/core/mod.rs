//! Shared domain types and conversions between instance, semantic and
//! boundary representations.
//!
//! The central currency is [`InstanceMap`]: a non-negative label map where 0
//! is background and k is instance k. [`InstanceMap::to_semantic`] and
//! [`InstanceMap::to_boundary`] derive the two stage-1 training targets from
//! it; [`ProbabilityPair`] carries the stage-1 predictions the rest of the
//! pipeline consumes.

mod grid;
mod probfile;
mod types;

pub use grid::{resize_bilinear, resize_nearest, BBox, Grid};
pub use probfile::{load_prob_map, save_prob_map};
pub use types::{BoundaryMask, InstanceMap, Proposal, ProbabilityPair, RgbImage, SemanticMask};
