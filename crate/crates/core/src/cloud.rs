//! Point cloud and scene flow containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Per-point feature rows attached to a cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Ordered points in 3-space (meters), optionally with feature channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub features: Option<Features>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud must contain at least one point".into()));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Argument("point cloud has non-finite coordinates".into()));
        }
        Ok(PointCloud { points, features: None })
    }

    pub fn with_features(mut self, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || data.len() != cols * self.len() {
            return Err(Error::Argument(format!(
                "feature data of length {} does not form {} rows of {cols}",
                data.len(),
                self.len()
            )));
        }
        self.features = Some(Features { cols, data });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `L x 3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::Argument(format!("{} values do not form xyz rows", values.len())));
        }
        Self::new(values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Rows at `idx` (features included).
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let points = idx.iter().map(|&i| self.points[i]).collect();
        let features = self.features.as_ref().map(|f| Features {
            cols: f.cols,
            data: idx
                .iter()
                .flat_map(|&i| f.data[i * f.cols..(i + 1) * f.cols].iter().copied())
                .collect(),
        });
        PointCloud { points, features }
    }

    /// Largest distance between two points of the bounding box.
    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(self.points.iter())
    }
}

pub(crate) fn bbox_diagonal<'a>(points: impl Iterator<Item = &'a Point>) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    (0..3).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Frame 0 towards frame 1.
    Forward,
    /// Frame 1 towards frame 0.
    Backward,
}

/// Per-point displacement over one full frame interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFlow {
    pub vectors: Vec<Point>,
    pub direction: Direction,
}

impl SceneFlow {
    pub fn new(vectors: Vec<Point>, direction: Direction) -> Result<Self> {
        if vectors.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Argument("scene flow has non-finite vectors".into()));
        }
        Ok(SceneFlow { vectors, direction })
    }

    pub fn zeros(len: usize, direction: Direction) -> Self {
        SceneFlow {
            vectors: vec![[0.0; 3]; len],
            direction,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}
