use super::GeomError;
use crate::scalar::Scalar;

/// Universal sample container: positions, optional unit normals, per-point
/// features, optional labels. All arrays share the leading extent N.
#[derive(Debug, Clone)]
pub struct PointCloud<T> {
    n: usize,
    positions: Vec<T>,        // N×3, row-major
    normals: Option<Vec<T>>,  // N×3, unit rows
    features: Vec<T>,         // N×C
    feature_dim: usize,
    labels: Option<Vec<u32>>, // N
}

impl<T: Scalar> PointCloud<T> {
    pub fn from_positions(positions: Vec<T>) -> Result<Self, GeomError> {
        if positions.len() % 3 != 0 {
            return Err(GeomError::FieldLength {
                field: "positions",
                got: positions.len(),
                expected: positions.len() / 3 * 3,
            });
        }
        let n = positions.len() / 3;
        Ok(PointCloud {
            n,
            positions,
            normals: None,
            features: Vec::new(),
            feature_dim: 0,
            labels: None,
        })
    }

    pub fn with_normals(mut self, normals: Vec<T>) -> Result<Self, GeomError> {
        if normals.len() != self.n * 3 {
            return Err(GeomError::FieldLength {
                field: "normals",
                got: normals.len(),
                expected: self.n * 3,
            });
        }
        for i in 0..self.n {
            let norm = (normals[i * 3].acc().powi(2)
                + normals[i * 3 + 1].acc().powi(2)
                + normals[i * 3 + 2].acc().powi(2))
            .sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(GeomError::NonUnitNormal { index: i, norm });
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_features(mut self, features: Vec<T>, dim: usize) -> Result<Self, GeomError> {
        if features.len() != self.n * dim {
            return Err(GeomError::FieldLength {
                field: "features",
                got: features.len(),
                expected: self.n * dim,
            });
        }
        self.features = features;
        self.feature_dim = dim;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self, GeomError> {
        if labels.len() != self.n {
            return Err(GeomError::FieldLength {
                field: "labels",
                got: labels.len(),
                expected: self.n,
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> [T; 3] {
        [
            self.positions[i * 3],
            self.positions[i * 3 + 1],
            self.positions[i * 3 + 2],
        ]
    }

    pub fn normals(&self) -> Option<&[T]> {
        self.normals.as_deref()
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Check that every label is below the configured class count.
    pub fn validate_labels(&self, classes: usize) -> Result<(), GeomError> {
        if let Some(labels) = &self.labels {
            for (i, &l) in labels.iter().enumerate() {
                if l as usize >= classes {
                    return Err(GeomError::LabelRange {
                        index: i,
                        label: l,
                        classes,
                    });
                }
            }
        }
        Ok(())
    }

    /// Subcloud at the given point indices, preserving every present field.
    pub fn select(&self, indices: &[u32]) -> PointCloud<T> {
        let gather3 = |src: &[T]| {
            let mut out = Vec::with_capacity(indices.len() * 3);
            for &i in indices {
                out.extend_from_slice(&src[i as usize * 3..(i as usize + 1) * 3]);
            }
            out
        };
        let c = self.feature_dim;
        let mut features = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            features.extend_from_slice(&self.features[i as usize * c..(i as usize + 1) * c]);
        }
        PointCloud {
            n: indices.len(),
            positions: gather3(&self.positions),
            normals: self.normals.as_ref().map(|ns| gather3(ns)),
            features,
            feature_dim: c,
            labels: self
                .labels
                .as_ref()
                .map(|ls| indices.iter().map(|&i| ls[i as usize]).collect()),
        }
    }
}
