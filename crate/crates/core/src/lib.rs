//! Multi-layered height-map (MLH) shape descriptors and a small multi-view
//! convolutional classifier built on top of them.
//!
//! The geometry side turns a triangle mesh into a dense point cloud and then
//! into an `N x N x k` grid of height percentiles per view direction. The
//! learning side is a from-scratch tensor/layer core with three ways of
//! merging per-view branches: shared weights with element-wise max,
//! independent weights with element-wise max, and independent weights with
//! depth concatenation followed by a 3x3 convolution.

pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod format;
pub mod image;
pub mod mesh;
pub mod multiview;
pub mod nn;
pub mod sampling;
pub mod train;
pub mod voxel;

pub use descriptor::{
    compute_bundle, compute_mlh, orient_and_normalize, percentile, MlhDescriptor,
    MultiViewBundle, ViewDirection, INF_SENTINEL,
};
pub use error::{Error, Result};
pub use mesh::{Aabb, LabeledShape, Primitive, TriangleMesh};
pub use sampling::{PointCloud, SamplingConfig};
pub use voxel::VoxelGrid;
