//! Desk-scale laboratory for in-context meta LoRA fusion.
//!
//! The crate trains LoRA adapters on a synthetic task suite, extracts
//! activation-space task vectors, trains a task-vector-conditioned fusion
//! VAE with a first-order meta-learning loop, decodes fused adapters, and
//! compares them against six training-free merge baselines under shared
//! multi-task metrics.
//!
//! Everything is deterministic: given one config and seed, every array in
//! the pipeline is bit-identical across runs and platforms (64-bit mode).

pub mod config;
pub mod container;
pub mod error;
pub mod evalmetrics;
pub mod fusion;
pub mod fvae;
pub mod metaloop;
pub mod numerics;
pub mod pipeline;
pub mod taskvec;
pub mod toybase;

pub use error::{Error, Result};
