//! Labeled collections of three-view descriptor bundles, built either from a
//! ModelNet-style directory tree or from jittered synthetic primitives.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::{compute_bundle, MultiViewBundle};
use crate::error::{Error, Result};
use crate::mesh::{generate_primitive, load_mesh, Primitive, TriangleMesh};
use crate::sampling::SamplingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub bundle: MultiViewBundle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub n: usize,
    pub k: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Labels in range and every bundle at the dataset's `(N, k)`.
    pub fn validate(&self) -> Result<()> {
        for rec in &self.records {
            if rec.label >= self.class_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: rec.label,
                    classes: self.class_names.len(),
                });
            }
            if rec.bundle.n() != self.n || rec.bundle.k() != self.k {
                return Err(Error::ShapeMismatch(format!(
                    "record {} is {}x{}x{}, dataset is {}x{}x{}",
                    rec.id,
                    rec.bundle.n(),
                    rec.bundle.n(),
                    rec.bundle.k(),
                    self.n,
                    self.n,
                    self.k
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Record indices of one split, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for rec in self.records.iter().filter(|r| r.split == split) {
            counts[rec.label] += 1;
        }
        counts
    }
}

/// SplitMix64 finalizer; spreads `(seed, index)` into a per-shape seed.
pub fn shape_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const SYNTHETIC_CLASSES: [&str; 4] = ["box", "sphere", "cylinder", "cone"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Number of shape families used, from the front of [`SYNTHETIC_CLASSES`].
    pub classes: usize,
    pub per_class: usize,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
}

/// One jittered primitive of family `class`. Proportions vary per shape; the
/// ellipsoid gets an independent scale per axis.
pub fn synthetic_mesh(class: usize, seed: u64) -> Result<TriangleMesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let segments = 24;
    let (primitive, scale) = match class {
        0 => (
            Primitive::Box {
                extents: [u(0.4, 1.0), u(0.4, 1.0), u(0.4, 1.0)],
            },
            [1.0; 3],
        ),
        1 => (
            Primitive::Sphere {
                radius: 0.5,
                subdivisions: 3,
            },
            [u(0.7, 1.0), u(0.7, 1.0), u(0.7, 1.0)],
        ),
        2 => (
            Primitive::Cylinder {
                radius: u(0.2, 0.5),
                height: u(0.5, 1.2),
                segments,
            },
            [1.0; 3],
        ),
        3 => (
            Primitive::Cone {
                radius: u(0.25, 0.5),
                height: u(0.5, 1.2),
                segments,
            },
            [1.0; 3],
        ),
        other => {
            return Err(Error::ConfigInvalid(format!(
                "synthetic class {other} does not exist (at most {})",
                SYNTHETIC_CLASSES.len()
            )))
        }
    };
    let jitter_seed = rng.random();
    let mesh = generate_primitive(&primitive, 0.005, jitter_seed)?;
    if scale == [1.0; 3] {
        return Ok(mesh);
    }
    let vertices = mesh
        .vertices()
        .iter()
        .map(|v| [v[0] * scale[0], v[1] * scale[1], v[2] * scale[2]])
        .collect();
    TriangleMesh::new(vertices, mesh.faces().to_vec())
}

/// Class-major records (`per_class` of each family); every fifth record is
/// held out for testing.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > SYNTHETIC_CLASSES.len() {
        return Err(Error::ConfigInvalid(format!(
            "synthetic datasets have 1..={} classes, got {}",
            SYNTHETIC_CLASSES.len(),
            spec.classes
        )));
    }
    if spec.per_class == 0 {
        return Err(Error::EmptyClass(SYNTHETIC_CLASSES[0].into()));
    }
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        for j in 0..spec.per_class {
            let index = records.len();
            let seed = shape_seed(spec.seed, index as u64);
            let mesh = synthetic_mesh(class, seed)?;
            let sampling = SamplingConfig::with_seed(seed ^ 0x5A5A_5A5A);
            records.push(Record {
                id: format!("{}_{j:04}", SYNTHETIC_CLASSES[class]),
                label: class,
                split: if index % 5 == 4 { Split::Test } else { Split::Train },
                bundle: compute_bundle(&mesh, spec.n, spec.k, &sampling)?,
            });
        }
    }
    Ok(Dataset {
        class_names: SYNTHETIC_CLASSES[..spec.classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        n: spec.n,
        k: spec.k,
        records,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::from(e).with_path(dir))?;
    let mut out = Vec::new();
    for entry in read {
        out.push(entry.map_err(|e| Error::from(e).with_path(dir))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_mesh_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("off") || e.eq_ignore_ascii_case("obj"))
}

/// Reads `root/<class>/{train,test}/*.off` (or `.obj`). Classes are the
/// subdirectories of `root` in sorted order; files are visited in sorted
/// order, train before test, and shape `i` samples with
/// `shape_seed(seed, i)`.
pub fn build_from_directory(root: &Path, n: usize, k: usize, seed: u64) -> Result<Dataset> {
    let classes: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if classes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no class directories",
            root.display()
        )));
    }
    let mut class_names = Vec::with_capacity(classes.len());
    let mut records = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let name = class_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let before = records.len();
        for (split, sub) in [(Split::Train, "train"), (Split::Test, "test")] {
            let dir = class_dir.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for path in sorted_entries(&dir)?.into_iter().filter(|p| is_mesh_file(p)) {
                let index = records.len() as u64;
                let mesh = load_mesh(&path)?;
                let sampling = SamplingConfig::with_seed(shape_seed(seed, index));
                let bundle =
                    compute_bundle(&mesh, n, k, &sampling).map_err(|e| e.with_path(&path))?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                records.push(Record {
                    id: format!("{name}/{sub}/{stem}"),
                    label,
                    split,
                    bundle,
                });
            }
        }
        if records.len() == before {
            return Err(Error::EmptyClass(name));
        }
        class_names.push(name);
    }
    Ok(Dataset {
        class_names,
        n,
        k,
        records,
    })
}
