use super::GeomError;
use crate::scalar::Scalar;

/// Neighbor search metric. Euclidean covers both coordinate space (D = 3)
/// and feature space (D = C).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
}

/// Per-query neighbor table: indices and ascending distances.
#[derive(Debug, Clone)]
pub struct NeighborIndex<T> {
    n: usize,
    k: usize,
    indices: Vec<u32>,
    distances: Vec<T>,
}

impl<T: Scalar> NeighborIndex<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn distances(&self) -> &[T] {
        &self.distances
    }

    pub fn indices_row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances_row(&self, i: usize) -> &[T] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

#[inline]
fn dist2<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x.acc() - y.acc();
        acc += d * d;
    }
    acc
}

/// Exact k nearest neighbors of every query among the source points.
///
/// Ties break toward the lower source index; a query searching its own
/// cloud finds itself at distance zero.
pub fn knn<T: Scalar>(
    source: &[T],
    n: usize,
    queries: &[T],
    m: usize,
    dim: usize,
    k: usize,
    _metric: Metric,
) -> Result<NeighborIndex<T>, GeomError> {
    if dim == 0 {
        return Err(GeomError::Argument {
            op: "knn",
            msg: "dimension must be at least 1".into(),
        });
    }
    if source.len() != n * dim || queries.len() != m * dim {
        return Err(GeomError::Argument {
            op: "knn",
            msg: format!(
                "buffer lengths {} / {} do not match n={n}, m={m}, dim={dim}",
                source.len(),
                queries.len()
            ),
        });
    }
    if k == 0 || k > n {
        return Err(GeomError::Argument {
            op: "knn",
            msg: format!("k = {k} out of range for {n} source points"),
        });
    }

    let mut indices = vec![0u32; m * k];
    let mut distances = vec![T::zero(); m * k];
    let mut row: Vec<(f64, u32)> = Vec::with_capacity(n);
    for q in 0..m {
        let qv = &queries[q * dim..(q + 1) * dim];
        row.clear();
        for i in 0..n {
            row.push((dist2(&source[i * dim..(i + 1) * dim], qv), i as u32));
        }
        let cmp = |a: &(f64, u32), b: &(f64, u32)| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        };
        if k < n {
            row.select_nth_unstable_by(k - 1, cmp);
            row.truncate(k);
        }
        row.sort_unstable_by(cmp);
        for (j, (d2, i)) in row.iter().take(k).enumerate() {
            indices[q * k + j] = *i;
            distances[q * k + j] = T::from_acc(d2.sqrt());
        }
    }
    Ok(NeighborIndex {
        n: m,
        k,
        indices,
        distances,
    })
}
