//! Speed and steering-angle prediction from camera frames and segmentation masks.
//!
//! The pipeline ingests per-chapter video frames plus precomputed segmentation
//! label maps, builds windowed sequence samples, augments them with
//! label-correcting transforms, trains one of three network architectures with
//! per-target best checkpointing, and ensembles per-model predictions by
//! averaging.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod models;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{DriveError, ErrorKind, Result};
