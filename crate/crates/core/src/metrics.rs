//! Voxel geometry metrics: IoU, Chamfer distance and F-score.
//!
//! Distances are measured between centres of occupied voxels in the
//! normalized cube, so one cell pitch at resolution `n` is `1 / n`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::VoxelGrid;

pub const DEFAULT_TAU: f64 = 0.05;
pub const CD_CONVENTION: &str = "symmetric-mean-euclidean-half";

fn same_resolution(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.n() == b.n() {
        Ok(())
    } else {
        Err(Error::ResolutionMismatch {
            left: a.n(),
            right: b.n(),
        })
    }
}

/// `|a ∩ b| / |a ∪ b|`, 1.0 when both grids are empty.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    same_resolution(a, b)?;
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

pub fn voxel_centers(grid: &VoxelGrid) -> Vec<[f64; 3]> {
    grid.occupied().map(|(x, y, z)| grid.voxel_center(x, y, z)).collect()
}

#[inline]
pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Uniform hash grid over points in the normalized cube.
pub struct SpatialHash {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<[f64; 3]>>,
    /// Inclusive range of occupied cell keys per axis.
    lo: [i64; 3],
    hi: [i64; 3],
}

impl SpatialHash {
    pub fn new(points: &[[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0);
        let mut cells: HashMap<_, Vec<_>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for p in points {
            let key = Self::key_of(p, cell);
            let k = [key.0, key.1, key.2];
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(key).or_default().push(*p);
        }
        Self { cell, cells, lo, hi }
    }

    fn key_of(p: &[f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Distance from `q` to the nearest stored point, searching cell shells
    /// outward until no unvisited cell can hold a closer point.
    pub fn nearest_distance(&self, q: &[f64; 3]) -> Option<f64> {
        if self.cells.is_empty() {
            return None;
        }
        let (cx, cy, cz) = Self::key_of(q, self.cell);
        let c = [cx, cy, cz];
        // shells beyond this radius contain no cells
        let max_r = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            for dz in -r..=r {
                for dy in -r..=r {
                    let on_face = dz.abs() == r || dy.abs() == r;
                    let step = if on_face { 1 } else { (2 * r).max(1) as usize };
                    for dx in (-r..=r).step_by(step) {
                        if let Some(points) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for p in points {
                                let d = distance(q, p);
                                if d < best {
                                    best = d;
                                }
                            }
                        }
                    }
                }
            }
            // every point outside shells 0..=r is farther than r cells away
            if best <= r as f64 * self.cell {
                break;
            }
        }
        Some(best)
    }
}

fn hash_cell(n: usize) -> f64 {
    4.0 / n as f64
}

fn nearest_distances(from: &[[f64; 3]], to: &SpatialHash) -> Vec<f64> {
    from.iter()
        .map(|p| to.nearest_distance(p).expect("non-empty target"))
        .collect()
}

fn non_empty(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::EmptyGrid)
    } else {
        Ok(())
    }
}

/// Symmetric Chamfer distance:
/// `½ (mean_p min_q |p - q| + mean_q min_p |q - p|)`.
pub fn chamfer(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    same_resolution(a, b)?;
    non_empty(a, b)?;
    let (pa, pb) = (voxel_centers(a), voxel_centers(b));
    let cell = hash_cell(a.n());
    let (ha, hb) = (SpatialHash::new(&pa, cell), SpatialHash::new(&pb, cell));
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(nearest_distances(&pa, &hb)) + mean(nearest_distances(&pb, &ha))))
}

/// F-score at threshold `tau`: harmonic mean of the fraction of `a` points
/// within `tau` of `b` and vice versa.
pub fn f_score(a: &VoxelGrid, b: &VoxelGrid, tau: f64) -> Result<f64> {
    same_resolution(a, b)?;
    non_empty(a, b)?;
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let (pa, pb) = (voxel_centers(a), voxel_centers(b));
    let cell = hash_cell(a.n());
    let (ha, hb) = (SpatialHash::new(&pa, cell), SpatialHash::new(&pb, cell));
    let frac = |v: Vec<f64>| v.iter().filter(|&&d| d <= tau).count() as f64 / v.len() as f64;
    let precision = frac(nearest_distances(&pa, &hb));
    let recall = frac(nearest_distances(&pb, &ha));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub chamfer: f64,
    pub f_score: f64,
    pub tau: f64,
    pub n: usize,
    pub cd_convention: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn eval_report(pred: &VoxelGrid, gt: &VoxelGrid, tau: f64) -> Result<EvalReport> {
    Ok(EvalReport {
        iou: voxel_iou(pred, gt)?,
        chamfer: chamfer(pred, gt)?,
        f_score: f_score(pred, gt, tau)?,
        tau,
        n: gt.n(),
        cd_convention: CD_CONVENTION.into(),
    })
}
