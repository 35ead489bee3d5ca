use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed record on line {line}: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("face references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange { index: i64, count: usize },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid primitive parameters: {0}")]
    InvalidParams(String),

    #[error("mesh has zero total surface area")]
    ZeroAreaMesh,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("percentile of an empty list")]
    EmptyList,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("layer {layer} out of range 1..={k}")]
    LayerOutOfRange { layer: usize, k: usize },

    #[error("point ({0}, {1}, {2}) lies outside the unit cube")]
    PointOutOfRange(f64, f64, f64),
    #[error("resolution mismatch: descriptor N={descriptor}, voxel grid R={grid}")]
    ResolutionMismatch { descriptor: usize, grid: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("channel expansion supports k in {{3, 5}}, got {0}")]
    UnsupportedK(usize),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid file contents: {0}")]
    InvalidData(String),

    #[error("class {0:?} has no shapes")]
    EmptyClass(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn with_path(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
