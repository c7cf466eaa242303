//! Engine for optimizing natural-language class definitions for few-shot
//! object detection with black-box multimodal LLMs.
//!
//! The crate is organized around three layers:
//!
//! - detection plumbing: [`geometry`], [`dataset`], [`eval`] (greedy matching,
//!   COCO-style mAP, confusion matrices, TIDE-style error buckets);
//! - model access: [`backend`] (HTTP chat backends plus a deterministic
//!   scripted mock), [`prompts`] (template registry), [`annotate`] (box
//!   overlays for visual prompts);
//! - the optimization loop itself: [`mining`] (error severity scoring),
//!   [`optimizer`] (bootstrap, error-driven refinement, validation
//!   selection) and [`calibrate`] (VQA-score confidence re-ranking).

pub mod annotate;
pub mod backend;
pub mod calibrate;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mining;
pub mod optimizer;
pub mod prompts;

pub use error::{Error, Result};
