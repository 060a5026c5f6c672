//! Point cloud and sample-index types.

use crate::error::{Error, Result};

/// An ordered list of 3-D points. Coordinates are finite `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("point cloud must contain at least one point".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Domain(format!("non-finite coordinate at point {i}")));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// Gather a sub-cloud by indices.
    pub fn select(&self, indices: &SampleIndices) -> PointCloud {
        PointCloud { points: indices.as_slice().iter().map(|&i| self.points[i]).collect() }
    }

    /// Squared Euclidean distance between points `i` of self and `q`.
    pub fn sq_dist_to(&self, i: usize, q: [f64; 3]) -> f64 {
        sq_dist(self.points[i], q)
    }
}

pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// An ordered list of distinct indices into a [`PointCloud`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleIndices {
    indices: Vec<usize>,
}

impl SampleIndices {
    /// Validates range and distinctness against a cloud of `n` points.
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n {
                return Err(Error::Domain(format!("index {i} out of range for {n} points")));
            }
            if seen[i] {
                return Err(Error::Domain(format!("duplicate index {i}")));
            }
            seen[i] = true;
        }
        Ok(SampleIndices { indices })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}
