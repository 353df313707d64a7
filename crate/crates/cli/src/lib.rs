//! Command-line front-end for the maskcount pipeline: data generation,
//! training, pseudo-labeling, evaluation, ablations and timing.

pub mod commands;
pub mod config;
pub mod error;
