//! Intra-image contrastive learning for weakly supervised person search.
//!
//! A two-branch Siamese network (a search branch over whole scenes and an
//! instance branch over ground-truth crops) trained with many-to-one
//! consistency, hard-mined dense triplets, grid-masking occlusion contrast and
//! a clustered memory bank, plus the synthetic data and evaluation protocol
//! needed to exercise it end to end on a CPU.
//!
//! Module map:
//!
//! * [`synth`] - deterministic synthetic scenes, annotation IO, masked test sets
//! * [`model`] - backbone, RoIAlign, shared head, checkpoints
//! * [`assign`] - IoU assignment and grid masking
//! * [`losses`] - contrastive, OIM and detection losses with analytic gradients
//! * [`membank`] - cluster-level memory bank
//! * [`trainer`] - training loop, configs and the ablation matrix
//! * [`eval`] - person-search evaluation protocol
//! * [`experiment`] - seeded runs and ablation tables

pub mod assign;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod membank;
pub mod model;
pub mod proposals;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use embedding::Embedding;
pub use error::{Error, Result};
pub use geometry::BBox;
pub use image::Image;
