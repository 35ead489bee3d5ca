//! Brute-force voxel occupancy reference for descriptor validation.
//!
//! The grid keeps a point count per voxel. Occupancy is `count > 0`; the
//! counts let [`mlh_from_voxels`] take percentiles over the same multiset of
//! samples as the descriptor, with each height quantized to its voxel
//! center.

use crate::descriptor::{
    layer_fraction, percentile_sorted, MlhDescriptor, ViewDirection, INF_SENTINEL,
};
use crate::error::{Error, Result};
use crate::sampling::PointCloud;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    r: usize,
    counts: Vec<u32>,
}

impl VoxelGrid {
    pub fn new(r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("voxel resolution must be >= 1".into()));
        }
        Ok(Self {
            r,
            counts: vec![0; r * r * r],
        })
    }

    pub fn resolution(&self) -> usize {
        self.r
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.r + y) * self.r + z
    }

    pub fn is_occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.counts[self.index(x, y, z)] > 0
    }

    pub fn count(&self, x: usize, y: usize, z: usize) -> u32 {
        self.counts[self.index(x, y, z)]
    }

    /// Marks one more point in voxel `(x, y, z)`.
    pub fn insert(&mut self, x: usize, y: usize, z: usize) {
        let i = self.index(x, y, z);
        self.counts[i] += 1;
    }

    pub fn occupied_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn column_occupied(&self, x: usize, y: usize) -> bool {
        (0..self.r).any(|z| self.is_occupied(x, y, z))
    }

    /// Center height of voxel layer `z`.
    pub fn center(&self, z: usize) -> f64 {
        (z as f64 + 0.5) / self.r as f64
    }
}

fn voxel_index(coord: f64, r: usize) -> usize {
    // identical arithmetic to the descriptor binning
    ((coord * r as f64).floor() as usize).min(r - 1)
}

/// Voxelizes a cloud already normalized into `[0, 1]^3`.
pub fn voxelize_points(normalized: &PointCloud, r: usize) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(r)?;
    for p in &normalized.points {
        if p.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::PointOutOfRange(p[0], p[1], p[2]));
        }
        grid.insert(
            voxel_index(p[0], r),
            voxel_index(p[1], r),
            voxel_index(p[2], r),
        );
    }
    Ok(grid)
}

/// Descriptor at voxel precision: per column the heights are the centers
/// of occupied voxels, repeated by their point count, and the layers are
/// the same interpolated percentiles as the direct computation.
pub fn mlh_from_voxels(grid: &VoxelGrid, k: usize) -> Result<MlhDescriptor> {
    if k == 0 {
        return Err(Error::InvalidArgument("layer count must be >= 1".into()));
    }
    let r = grid.r;
    let mut desc = MlhDescriptor::empty(r, k, ViewDirection::PosZ);
    let mut heights = Vec::new();
    for x in 0..r {
        for y in 0..r {
            heights.clear();
            for z in 0..r {
                let c = grid.count(x, y, z);
                heights.extend(std::iter::repeat_n(grid.center(z), c as usize));
            }
            if heights.is_empty() {
                continue;
            }
            for i in 0..k {
                desc.set(
                    x,
                    y,
                    i,
                    percentile_sorted(&heights, layer_fraction(i, k)) as f32,
                );
            }
        }
    }
    Ok(desc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Heights over a column with no occupied voxel.
    UnattestedColumn,
    /// Occupied column stored as empty.
    MissingColumn,
    /// Minimum or maximum layer with no occupied voxel center within
    /// `0.5 / R`.
    UnattestedExtreme,
    /// Intermediate layer not bracketed by occupied voxels.
    UnbracketedLayer,
    /// Value neither a height in `[0, 1]` nor the sentinel.
    InvalidValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub p: usize,
    pub q: usize,
    /// 1-based layer, `None` for column-level problems.
    pub layer: Option<usize>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub resolution: usize,
    pub violations: Vec<Violation>,
    /// Largest `|desc - mlh_from_voxels(grid, k)|` over entries finite in both.
    pub max_deviation: f64,
}

impl ConsistencyReport {
    /// Quantization bound for the voxel comparison.
    pub fn tolerance(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.max_deviation <= self.tolerance()
    }
}

/// Checks that every height in `desc` is backed by occupancy in `grid`.
/// The first and last layers are actual sample heights and must sit within
/// half a voxel (plus `1e-6`) of an occupied voxel center; interpolated
/// layers must lie between occupied voxels.
pub fn consistency_check(desc: &MlhDescriptor, grid: &VoxelGrid) -> Result<ConsistencyReport> {
    let r = grid.r;
    if desc.n() != r {
        return Err(Error::ResolutionMismatch {
            descriptor: desc.n(),
            grid: r,
        });
    }
    let k = desc.k();
    let tol = 0.5 / r as f64 + 1e-6;
    let oracle = mlh_from_voxels(grid, k)?;
    let mut violations = Vec::new();
    let mut max_deviation = 0.0f64;

    for p in 0..r {
        for q in 0..r {
            let bin = desc.bin(p, q);
            let centers: Vec<f64> = (0..r)
                .filter(|&z| grid.is_occupied(p, q, z))
                .map(|z| grid.center(z))
                .collect();
            let mut push = |layer, kind| {
                violations.push(Violation { p, q, layer, kind });
            };
            let stored = bin.iter().any(|&v| v != INF_SENTINEL);
            match (stored, centers.is_empty()) {
                (false, true) => continue,
                (true, true) => {
                    push(None, ViolationKind::UnattestedColumn);
                    continue;
                }
                (false, false) => {
                    push(None, ViolationKind::MissingColumn);
                    continue;
                }
                (true, false) => {}
            }
            for (i, &v) in bin.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    push(Some(i + 1), ViolationKind::InvalidValue);
                    continue;
                }
                let h = v as f64;
                let extreme = i == 0 || i + 1 == k;
                let attested = if extreme {
                    centers.iter().any(|c| (c - h).abs() <= tol)
                } else {
                    centers.iter().any(|c| *c <= h + tol) && centers.iter().any(|c| *c >= h - tol)
                };
                if !attested {
                    push(
                        Some(i + 1),
                        if extreme {
                            ViolationKind::UnattestedExtreme
                        } else {
                            ViolationKind::UnbracketedLayer
                        },
                    );
                }
                let o = oracle.get(p, q, i);
                if o != INF_SENTINEL {
                    max_deviation = max_deviation.max((h - o as f64).abs());
                }
            }
        }
    }
    Ok(ConsistencyReport {
        resolution: r,
        violations,
        max_deviation,
    })
}
