//! Point-set kernels: farthest point sampling, exact k-nearest neighbors,
//! time-scaled warping and inverse-distance flow upsampling.

use rayon::prelude::*;

use crate::cloud::{dist2, Direction, Point, PointCloud, SceneFlow};
use crate::error::{Error, Result};

/// Distance floor for inverse-distance weights.
pub const IDW_FLOOR: f64 = 1e-10;

/// Greedy farthest point sampling.
///
/// Starts at `start`; each following pick maximizes the distance to the
/// already selected set, ties going to the lowest index.
pub fn fps(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::Argument(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::Argument(format!("start index {start} out of range for {n} points")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = start;
    selected.push(cur);
    min_d[cur] = -1.0;
    for _ in 1..m {
        let c = points[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_d[i] < 0.0 {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
        min_d[cur] = -1.0;
        selected.push(cur);
    }
    Ok(selected)
}

/// [`fps`] on a [`PointCloud`].
pub fn fps_cloud(pc: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    fps(&pc.points, m, start)
}

/// Mean distance from each point to its nearest other point; 1 when the
/// cloud has fewer than two distinct points.
pub fn mean_spacing(points: &[Point]) -> Result<f64> {
    if points.len() < 2 {
        return Ok(1.0);
    }
    let nn = knn(points, points, 2)?;
    let mean = (0..points.len()).map(|q| nn.row_distances(q)[1]).sum::<f64>() / points.len() as f64;
    Ok(if mean > 0.0 { mean } else { 1.0 })
}

/// How [`resample`] changed a cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampled {
    Unchanged,
    /// Reduced by farthest point sampling.
    Subsampled,
    /// Padded by repeating points cyclically.
    Duplicated,
}

/// Brings `pc` to exactly `l` points: FPS from point 0 when larger, cyclic
/// duplication when smaller. Features are dropped.
pub fn resample(pc: &PointCloud, l: usize) -> Result<(PointCloud, Resampled)> {
    if l == 0 {
        return Err(Error::Argument("cannot resample to zero points".into()));
    }
    let n = pc.len();
    let (idx, how): (Vec<usize>, _) = match n.cmp(&l) {
        std::cmp::Ordering::Equal => return Ok((pc.clone(), Resampled::Unchanged)),
        std::cmp::Ordering::Greater => (fps(&pc.points, l, 0)?, Resampled::Subsampled),
        std::cmp::Ordering::Less => ((0..l).map(|i| i % n).collect(), Resampled::Duplicated),
    };
    Ok((PointCloud::new(idx.iter().map(|&i| pc.points[i]).collect())?, how))
}

/// `k` nearest reference points of every query, row-major `Q x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborIndex {
    pub fn queries(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn row_distances(&self, q: usize) -> &[f64] {
        &self.distances[q * self.k..(q + 1) * self.k]
    }
}

/// Exact brute-force k-nearest neighbors; ties go to the lowest reference index.
pub fn knn(query: &[Point], reference: &[Point], k: usize) -> Result<NeighborIndex> {
    if k == 0 || k > reference.len() {
        return Err(Error::Argument(format!(
            "k = {k} invalid for a reference cloud of {} points",
            reference.len()
        )));
    }
    let rows: Vec<(Vec<usize>, Vec<f64>)> = query
        .par_iter()
        .map(|q| {
            // (squared distance, index), kept sorted ascending.
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (j, r) in reference.iter().enumerate() {
                let d = dist2(q, r);
                if best.len() == k && d >= best[k - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, j));
                best.truncate(k);
            }
            best.into_iter().map(|(d, j)| (j, d.sqrt())).unzip()
        })
        .collect();
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut distances = Vec::with_capacity(query.len() * k);
    for (i, d) in rows {
        indices.extend(i);
        distances.extend(d);
    }
    Ok(NeighborIndex { k, indices, distances })
}

/// [`knn`] on clouds.
pub fn knn_cloud(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<NeighborIndex> {
    knn(&query.points, &reference.points, k)
}

/// Displaces `pc` by the flow scaled to time `t`: forward flows move by
/// `t * sf`, backward flows by `(1 - t) * sf`. Features are kept.
pub fn warp(pc: &PointCloud, sf: &SceneFlow, t: f64) -> Result<PointCloud> {
    if sf.len() != pc.len() {
        return Err(Error::Argument(format!(
            "flow has {} rows but the cloud has {}",
            sf.len(),
            pc.len()
        )));
    }
    let s = match sf.direction {
        Direction::Forward => t,
        Direction::Backward => 1.0 - t,
    };
    let points = pc
        .points
        .iter()
        .zip(&sf.vectors)
        .map(|(p, v)| [p[0] + s * v[0], p[1] + s * v[1], p[2] + s * v[2]])
        .collect();
    Ok(PointCloud {
        points,
        features: pc.features.clone(),
    })
}

/// Inverse-distance interpolation weights from `coarse` onto `fine`.
///
/// Returns `(indices, weights, k)` with `k = min(k, coarse.len())`. A fine
/// point that coincides with a coarse point takes that point's value alone.
pub fn idw_weights(coarse: &[Point], fine: &[Point], k: usize) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if coarse.is_empty() {
        return Err(Error::Argument("cannot upsample from an empty coarse cloud".into()));
    }
    let k = k.min(coarse.len()).max(1);
    let nn = knn(fine, coarse, k)?;
    let mut weights = Vec::with_capacity(nn.indices.len());
    for q in 0..fine.len() {
        let d = nn.row_distances(q);
        if d[0] == 0.0 {
            weights.push(1.0);
            weights.extend(std::iter::repeat_n(0.0, k - 1));
            continue;
        }
        let inv: Vec<f64> = d.iter().map(|&x| 1.0 / x.max(IDW_FLOOR)).collect();
        let total: f64 = inv.iter().sum();
        weights.extend(inv.iter().map(|w| w / total));
    }
    Ok((nn.indices, weights, k))
}

/// Coarse-to-fine flow transfer by inverse-distance weighting over `k`
/// coarse neighbors.
pub fn upsample_flow(coarse_pc: &PointCloud, coarse_sf: &SceneFlow, fine_pc: &PointCloud, k: usize) -> Result<SceneFlow> {
    if coarse_sf.len() != coarse_pc.len() {
        return Err(Error::Argument(format!(
            "coarse flow has {} rows but the coarse cloud has {}",
            coarse_sf.len(),
            coarse_pc.len()
        )));
    }
    let (idx, w, k) = idw_weights(&coarse_pc.points, &fine_pc.points, k)?;
    let vectors = (0..fine_pc.len())
        .map(|q| {
            let row = &idx[q * k..(q + 1) * k];
            let base = coarse_sf.vectors[row[0]];
            // Offsets from the nearest neighbor keep constant fields exact.
            let mut out = base;
            for (j, &ci) in row.iter().enumerate().skip(1) {
                let v = coarse_sf.vectors[ci];
                let wj = w[q * k + j];
                for d in 0..3 {
                    out[d] += wj * (v[d] - base[d]);
                }
            }
            out
        })
        .collect();
    Ok(SceneFlow {
        vectors,
        direction: coarse_sf.direction,
    })
}
