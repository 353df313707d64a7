//! Segment-then-count pipeline for exemplar-conditioned multi-class counting.
//!
//! A base counter learns to regress density maps from an image and a few
//! exemplar boxes. Pseudo segmentation masks are mined per image with K-Means
//! over patch descriptors, choosing the cluster count whose mask lets the
//! frozen counter best match the ground truth. An exemplar-conditioned
//! segmenter is trained on those masks and used at test time to mask the
//! similarity map before counting.

pub mod counter;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod netpbm;
pub mod nn;
pub mod numerics;
pub mod pseudo;
pub mod scene;
pub mod segmenter;

pub use error::{Error, Result};
