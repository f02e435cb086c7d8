//! Five-stream multi-modal emotion recognition: modality encoders, a patch
//! transformer for semantic context, missing-modality-robust fusion,
//! weighted multi-label losses, a training loop, and an AP/mAP evaluation
//! and ablation harness.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod evaluation;
pub mod fusion;
pub mod iofmt;
pub mod losses;
pub mod model;
pub mod training;
pub mod params;
pub mod rngstream;
pub mod tensor;
