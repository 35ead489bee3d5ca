//! Multi-layered height-map descriptors.
//!
//! For a view direction the normalized cloud is binned on an `N x N` grid
//! over the plane orthogonal to the view. Each occupied bin stores `k`
//! evenly spaced percentiles of the heights that fall into it, from the
//! minimum (layer 1) to the maximum (layer `k`). Empty bins hold
//! [`INF_SENTINEL`] in every layer.

use crate::error::{Error, Result};
use crate::mesh::{Point3, TriangleMesh};
use crate::sampling::{required_point_count, sample_surface, PointCloud, SamplingConfig};

/// Height stored in every layer of a bin that no surface point projects into.
pub const INF_SENTINEL: f32 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViewDirection {
    PosX,
    PosY,
    PosZ,
    /// Unit vector; see [`ViewFrame::for_view`] for the in-plane axes used.
    Custom([f64; 3]),
}

impl ViewDirection {
    pub const CANONICAL: [ViewDirection; 3] =
        [ViewDirection::PosX, ViewDirection::PosY, ViewDirection::PosZ];

    pub fn custom(normal: [f64; 3]) -> Result<Self> {
        let len = normal.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !len.is_finite() || (len - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "view direction {normal:?} is not unit length ({len})"
            )));
        }
        Ok(ViewDirection::Custom(normal))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ViewDirection::PosX => "x",
            ViewDirection::PosY => "y",
            ViewDirection::PosZ => "z",
            ViewDirection::Custom(_) => "custom",
        }
    }
}

/// Orthonormal frame `(u, v, n)`: grid rows follow `u`, columns `v`, and
/// heights are measured along `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewFrame {
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub n: [f64; 3],
}

impl ViewFrame {
    /// Canonical views are right-handed cycles of the world axes. A custom
    /// normal gets `u` from the world axis least aligned with it
    /// (Gram-Schmidt) and `v = n x u`; callers needing another in-plane
    /// orientation can build a frame directly and use
    /// [`orient_and_normalize_frame`].
    pub fn for_view(view: ViewDirection) -> Self {
        match view {
            ViewDirection::PosZ => ViewFrame {
                u: [1.0, 0.0, 0.0],
                v: [0.0, 1.0, 0.0],
                n: [0.0, 0.0, 1.0],
            },
            ViewDirection::PosX => ViewFrame {
                u: [0.0, 1.0, 0.0],
                v: [0.0, 0.0, 1.0],
                n: [1.0, 0.0, 0.0],
            },
            ViewDirection::PosY => ViewFrame {
                u: [0.0, 0.0, 1.0],
                v: [1.0, 0.0, 0.0],
                n: [0.0, 1.0, 0.0],
            },
            ViewDirection::Custom(n) => {
                let axis = (0..3)
                    .min_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs()))
                    .unwrap_or(0);
                let mut helper = [0.0; 3];
                helper[axis] = 1.0;
                let d = dot(helper, n);
                let mut u = [helper[0] - d * n[0], helper[1] - d * n[1], helper[2] - d * n[2]];
                let len = dot(u, u).sqrt();
                u.iter_mut().for_each(|c| *c /= len);
                let v = crate::mesh::cross(n, u);
                ViewFrame { u, v, n }
            }
        }
    }

    fn apply(&self, p: &Point3) -> Point3 {
        [dot(self.u, *p), dot(self.v, *p), dot(self.n, *p)]
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Rotates the cloud so `view` maps to +Z, then translates the bounding-box
/// minimum to the origin and scales isotropically by `1 / max_extent`, so
/// every coordinate lands in `[0, 1]`. A cloud with zero extent collapses to
/// the origin.
pub fn orient_and_normalize(cloud: &PointCloud, view: ViewDirection) -> Result<PointCloud> {
    orient_and_normalize_frame(cloud, &ViewFrame::for_view(view))
}

pub fn orient_and_normalize_frame(cloud: &PointCloud, frame: &ViewFrame) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut points: Vec<Point3> = cloud.points.iter().map(|p| frame.apply(p)).collect();
    let mut min = points[0];
    let mut max = points[0];
    for p in &points {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
    if extent > 0.0 {
        for p in &mut points {
            for a in 0..3 {
                p[a] = (p[a] - min[a]) / extent;
            }
        }
    } else {
        points.iter_mut().for_each(|p| *p = [0.0; 3]);
    }
    Ok(PointCloud { points })
}

/// Linear-interpolation percentile at rank `fraction * (n - 1)` of the
/// ascending order statistics. `fraction = 0` is the minimum and `1` the
/// maximum.
pub fn percentile(values: &[f64], fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    check_fraction(fraction)?;
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, fraction))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if (0.0..=1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "percentile fraction {fraction} outside [0, 1]"
        )))
    }
}

/// `sorted` must be non-empty and ascending.
pub(crate) fn percentile_sorted(sorted: &[f64], fraction: f64) -> f64 {
    let rank = fraction * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (rank.ceil() as usize).min(sorted.len() - 1);
    let (a, b) = (sorted[lo], sorted[hi]);
    if lo == hi {
        return a;
    }
    (a + (rank - lo as f64) * (b - a)).clamp(a, b)
}

/// Fraction for layer `i` (0-based) of `k`.
pub(crate) fn layer_fraction(i: usize, k: usize) -> f64 {
    if k == 1 {
        0.0
    } else {
        i as f64 / (k - 1) as f64
    }
}

/// `min(floor(coord * n), n - 1)` for a coordinate in `[0, 1]`.
#[inline]
pub(crate) fn bin_index(coord: f64, n: usize) -> usize {
    ((coord * n as f64).floor() as usize).min(n - 1)
}

/// `N x N x k` height grid, row-major with the layer index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MlhDescriptor {
    n: usize,
    k: usize,
    view: ViewDirection,
    grid: Vec<f32>,
}

impl MlhDescriptor {
    /// A descriptor with every bin empty.
    pub fn empty(n: usize, k: usize, view: ViewDirection) -> Self {
        Self {
            n,
            k,
            view,
            grid: vec![INF_SENTINEL; n * n * k],
        }
    }

    pub fn from_grid(n: usize, k: usize, view: ViewDirection, grid: Vec<f32>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "descriptor dimensions must be >= 1 (N={n}, k={k})"
            )));
        }
        if grid.len() != n * n * k {
            return Err(Error::LengthMismatch(format!(
                "grid has {} values, expected {}",
                grid.len(),
                n * n * k
            )));
        }
        Ok(Self { n, k, view, grid })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn view(&self) -> ViewDirection {
        self.view
    }

    pub fn grid(&self) -> &[f32] {
        &self.grid
    }

    pub fn into_grid(self) -> Vec<f32> {
        self.grid
    }

    #[inline]
    pub fn index(&self, p: usize, q: usize, layer: usize) -> usize {
        (p * self.n + q) * self.k + layer
    }

    /// Layer index is 0-based here.
    pub fn get(&self, p: usize, q: usize, layer: usize) -> f32 {
        self.grid[self.index(p, q, layer)]
    }

    pub fn set(&mut self, p: usize, q: usize, layer: usize, value: f32) {
        let i = self.index(p, q, layer);
        self.grid[i] = value;
    }

    pub fn bin(&self, p: usize, q: usize) -> &[f32] {
        let start = self.index(p, q, 0);
        &self.grid[start..start + self.k]
    }

    pub fn is_occupied(&self, p: usize, q: usize) -> bool {
        self.bin(p, q)[0] != INF_SENTINEL
    }

    /// Bins that hold heights, in `(p, q)` order.
    pub fn occupied_bins(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|p| (0..self.n).map(move |q| (p, q)))
            .filter(|&(p, q)| self.is_occupied(p, q))
            .collect()
    }

    /// Lists every broken descriptor invariant: values outside
    /// `[0, 1] U {1.2}`, bins mixing the sentinel with heights, and layers
    /// that decrease.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in 0..self.n {
            for q in 0..self.n {
                let bin = self.bin(p, q);
                let empty = bin.iter().filter(|&&v| v == INF_SENTINEL).count();
                if empty != 0 && empty != self.k {
                    out.push(format!("bin ({p}, {q}) mixes sentinel and heights: {bin:?}"));
                    continue;
                }
                if empty == self.k {
                    continue;
                }
                if let Some(v) = bin.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    out.push(format!("bin ({p}, {q}) has out-of-range height {v}"));
                }
                if bin.windows(2).any(|w| w[0] > w[1]) {
                    out.push(format!("bin ({p}, {q}) is not monotone: {bin:?}"));
                }
            }
        }
        out
    }
}

/// Bucket heights of an already normalized cloud into an `n x n` grid.
/// Returns per-bin start offsets (length `n*n + 1`) and the heights laid out
/// bin by bin.
pub(crate) fn bucket_heights(cloud: &PointCloud, n: usize) -> (Vec<usize>, Vec<f64>) {
    let bins: Vec<usize> = cloud
        .points
        .iter()
        .map(|p| bin_index(p[0], n) * n + bin_index(p[1], n))
        .collect();
    let mut offsets = vec![0usize; n * n + 1];
    for &b in &bins {
        offsets[b + 1] += 1;
    }
    for i in 0..n * n {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut heights = vec![0.0; cloud.len()];
    for (p, &b) in cloud.points.iter().zip(&bins) {
        heights[cursor[b]] = p[2];
        cursor[b] += 1;
    }
    (offsets, heights)
}

/// Descriptor of an already normalized cloud (all coordinates in `[0,1]`).
pub fn mlh_from_normalized(
    normalized: &PointCloud,
    n: usize,
    k: usize,
    view: ViewDirection,
) -> Result<MlhDescriptor> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid resolution and layer count must be >= 1 (N={n}, k={k})"
        )));
    }
    let (offsets, mut heights) = bucket_heights(normalized, n);
    let mut desc = MlhDescriptor::empty(n, k, view);
    for b in 0..n * n {
        let bucket = &mut heights[offsets[b]..offsets[b + 1]];
        if bucket.is_empty() {
            continue;
        }
        bucket.sort_unstable_by(f64::total_cmp);
        let out = &mut desc.grid[b * k..(b + 1) * k];
        for (i, slot) in out.iter_mut().enumerate() {
            let h = percentile_sorted(bucket, layer_fraction(i, k));
            debug_assert!(h <= 1.0 + 1e-6, "height {h} escaped normalization");
            *slot = h.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(desc)
}

/// Full descriptor computation for one view of a sampled cloud.
pub fn compute_mlh(
    cloud: &PointCloud,
    n: usize,
    k: usize,
    view: ViewDirection,
) -> Result<MlhDescriptor> {
    let normalized = orient_and_normalize(cloud, view)?;
    mlh_from_normalized(&normalized, n, k, view)
}

/// The three canonical-axis descriptors of one shape, in X, Y, Z order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewBundle {
    views: [MlhDescriptor; 3],
}

impl MultiViewBundle {
    pub fn new(views: [MlhDescriptor; 3]) -> Result<Self> {
        let (n, k) = (views[0].n, views[0].k);
        if views.iter().any(|d| d.n != n || d.k != k) {
            return Err(Error::ShapeMismatch(
                "bundle views must share N and k".into(),
            ));
        }
        for (d, expected) in views.iter().zip(ViewDirection::CANONICAL) {
            if d.view != expected {
                return Err(Error::InvalidArgument(format!(
                    "bundle view {:?} in slot for {:?}",
                    d.view, expected
                )));
            }
        }
        Ok(Self { views })
    }

    pub fn n(&self) -> usize {
        self.views[0].n
    }

    pub fn k(&self) -> usize {
        self.views[0].k
    }

    pub fn views(&self) -> &[MlhDescriptor; 3] {
        &self.views
    }

    pub fn x(&self) -> &MlhDescriptor {
        &self.views[0]
    }

    pub fn y(&self) -> &MlhDescriptor {
        &self.views[1]
    }

    pub fn z(&self) -> &MlhDescriptor {
        &self.views[2]
    }
}

/// Samples the mesh once and computes the X, Y and Z descriptors from that
/// shared cloud.
pub fn compute_bundle(
    mesh: &TriangleMesh,
    n: usize,
    k: usize,
    config: &SamplingConfig,
) -> Result<MultiViewBundle> {
    let count = required_point_count(n, k, config)?;
    let cloud = sample_surface(mesh, count, config.rng_seed)?;
    bundle_from_cloud(&cloud, n, k)
}

pub fn bundle_from_cloud(cloud: &PointCloud, n: usize, k: usize) -> Result<MultiViewBundle> {
    let [x, y, z] = ViewDirection::CANONICAL;
    MultiViewBundle::new([
        compute_mlh(cloud, n, k, x)?,
        compute_mlh(cloud, n, k, y)?,
        compute_mlh(cloud, n, k, z)?,
    ])
}
