//! Area-weighted uniform sampling of points on a mesh surface.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{triangle_area, Point3, TriangleMesh};

/// Floor on the number of samples drawn for any descriptor.
pub const MIN_POINTS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One `x y z` line per point, 9 significant digits.
    pub fn to_xyz(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 48);
        for p in &self.points {
            let _ = writeln!(out, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Expected samples per occupied bin and layer.
    pub oversample_factor: f64,
    pub rng_seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            oversample_factor: 8.0,
            rng_seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..Self::default()
        }
    }
}

/// `ceil(c * k * N^2)` samples, never fewer than [`MIN_POINTS`].
pub fn required_point_count(n: usize, k: usize, config: &SamplingConfig) -> Result<usize> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid resolution and layer count must be >= 1 (N={n}, k={k})"
        )));
    }
    let c = config.oversample_factor;
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "oversample factor must be positive, got {c}"
        )));
    }
    let count = (c * k as f64 * (n * n) as f64).ceil() as usize;
    Ok(count.max(MIN_POINTS))
}

/// Draws `n` points uniformly over the surface: a triangle is picked with
/// probability proportional to its area, then a point inside it through the
/// square-root barycentric map. Zero-area triangles are never picked.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    sample_surface_indexed(mesh, n, seed).map(|(cloud, _)| cloud)
}

/// Same stream as [`sample_surface`], also returning the source face of
/// every point.
pub fn sample_surface_indexed(
    mesh: &TriangleMesh,
    n: usize,
    seed: u64,
) -> Result<(PointCloud, Vec<u32>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces().len());
    let mut total = 0.0;
    for f in 0..mesh.faces().len() {
        total += triangle_area(&mesh.triangle(f));
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::ZeroAreaMesh);
    }

    // ChaCha is counter based: a chunked parallel variant can seek each
    // chunk to `3 * first_index` words and reproduce this stream exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    for _ in 0..n {
        let pick: f64 = rng.random::<f64>() * total;
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        let face = cumulative
            .partition_point(|&c| c <= pick)
            .min(cumulative.len() - 1);
        let tri = mesh.triangle(face);
        points.push(barycentric_point(&tri, r1, r2));
        faces.push(face as u32);
    }
    Ok((PointCloud { points }, faces))
}

/// `(1 - sqrt(r1)) A + sqrt(r1)(1 - r2) B + sqrt(r1) r2 C`, clamped to the
/// triangle's own bounds so rounding never leaves its bounding box.
fn barycentric_point(tri: &[Point3; 3], r1: f64, r2: f64) -> Point3 {
    let s = r1.sqrt();
    let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
    let mut p = [0.0; 3];
    for axis in 0..3 {
        let (a, b, c) = (tri[0][axis], tri[1][axis], tri[2][axis]);
        let lo = a.min(b).min(c);
        let hi = a.max(b).max(c);
        p[axis] = (wa * a + wb * b + wc * c).clamp(lo, hi);
    }
    p
}
