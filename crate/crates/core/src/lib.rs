//! Point-cloud segmentation with joint geometric and semantic attention.
//!
//! The network aggregates per-point features through two interleaved
//! transformer blocks: a local block that weights each neighbor by the
//! product of its reciprocal Euclidean distance and an exponential
//! tangent-plane affinity, and a global block that refines full-range
//! attention with a multi-head voting mask. A hierarchical encoder-decoder
//! (farthest-point downsampling, inverse-distance upsampling) wraps the
//! blocks into a per-point classifier.
//!
//! Everything runs on a small reverse-mode differentiation kernel
//! ([`diff::Tape`]) so the whole model is trainable on a CPU and every
//! gradient is checkable against finite differences.

pub mod diff;
pub mod geom;
pub mod global;
pub mod io;
pub mod local;
pub mod metrics;
pub mod network;
pub mod scalar;
pub mod train;

pub use scalar::Scalar;
