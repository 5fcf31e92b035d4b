//! Non-differentiable point-cloud geometry: sampling, neighbor search,
//! normal estimation, upsampling interpolation, block partitioning.
//!
//! All operations are pure functions over immutable inputs.

mod blocks;
mod cloud;
mod fps;
mod interpolate;
mod knn;
mod normals;
#[cfg(test)]
mod tests;

pub use blocks::block_split;
pub use cloud::PointCloud;
pub use fps::fps;
pub use interpolate::{interpolate_features, interpolation_weights, INTERP_NEIGHBORS};
pub use knn::{knn, Metric, NeighborIndex};
pub use normals::estimate_normals;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("{op}: {msg}")]
    Argument { op: &'static str, msg: String },
    #[error("point cloud field {field} has length {got}, expected {expected}")]
    FieldLength {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("normal {index} has norm {norm}, expected 1 ± 1e-6")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("label {label} at point {index} exceeds class count {classes}")]
    LabelRange {
        index: usize,
        label: u32,
        classes: usize,
    },
}
