//! Lifelong retrieval model built from incrementally grown low-rank
//! adapters, routed by the 2-Wasserstein distance between per-domain
//! Gaussian feature statistics.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`] — dense matrices, Jacobi eigendecomposition, autodiff tape
//! - [`stats`] — Gaussian feature statistics and their Wasserstein distance
//! - [`selector`] — temperature-scheduled softmax routing over distances
//! - [`adapters`] — low-rank adapter banks on frozen linear layers
//! - [`encoder`] — small transformer encoder with adapter insertion sites
//! - [`training`] — two-stage per-step optimization (prototypes, adapters)
//! - [`lifelong`] — the step orchestrator and checkpoint format
//! - [`data`] — synthetic multi-domain retrieval benchmark generator
//! - [`eval`] — mAP / Rank-1 scoring, similarity and forgetting reports
//! - [`gradcheck`] — finite-difference certification of the tape

pub mod error;
pub mod gradcheck;
pub mod lifelong;
pub mod numerics;
pub mod rng;

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod selector;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
