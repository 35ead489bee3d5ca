//! Little-endian binary formats.
//!
//! * `MLHD` holds one descriptor: header, view tag, then `N * N * k` f32
//!   heights in `(p, q, layer)` order.
//! * `MLHS` holds a dataset: class names and records, each carrying three
//!   embedded `MLHD` blobs for the X, Y and Z views.
//! * `MLHW` holds a multi-view network checkpoint: the network config
//!   followed by every layer sequence, tensors stored as raw floats.

use std::path::Path;

use crate::dataset::{Dataset, Record, Split};
use crate::descriptor::{MlhDescriptor, MultiViewBundle, ViewDirection};
use crate::error::{Error, Result};
use crate::multiview::{Branches, MergeKind, MultiViewConfig, MultiViewNetwork};
use crate::nn::layers::{BatchNorm2d, Conv2d, Layer, Linear, Param};
use crate::nn::sequential::Sequential;
use crate::nn::tensor::{Scalar, Tensor};

pub const DESCRIPTOR_MAGIC: [u8; 4] = *b"MLHD";
pub const DATASET_MAGIC: [u8; 4] = *b"MLHS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MLHW";
pub const VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_BATCH_NORM: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_MAXPOOL: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_LINEAR: u8 = 5;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Self { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn blob(&mut self, bytes: &[u8]) {
        self.u32(bytes.len());
        self.buf.extend_from_slice(bytes);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    fn open(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::LengthMismatch(format!(
                "{} bytes is too short for a header",
                bytes.len()
            )));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        let mut r = Self { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::LengthMismatch(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.usize()?;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::InvalidData("string is not UTF-8".into()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let len = self.usize()?;
        self.take(len)
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::InvalidData(format!("bad flag byte {other}"))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::LengthMismatch(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::from(e).with_path(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::from(e).with_path(path))
}

// ---- descriptors ----

pub fn write_descriptor(desc: &MlhDescriptor) -> Vec<u8> {
    let mut w = Writer::new(DESCRIPTOR_MAGIC);
    w.u32(desc.n());
    w.u32(desc.k());
    match desc.view() {
        ViewDirection::PosX => w.u8(0),
        ViewDirection::PosY => w.u8(1),
        ViewDirection::PosZ => w.u8(2),
        ViewDirection::Custom(n) => {
            w.u8(3);
            n.iter().for_each(|&c| w.f32(c as f32));
        }
    }
    w.buf.reserve(desc.grid().len() * 4);
    desc.grid().iter().for_each(|&h| w.f32(h));
    w.buf
}

pub fn read_descriptor(bytes: &[u8]) -> Result<MlhDescriptor> {
    let mut r = Reader::open(bytes, DESCRIPTOR_MAGIC)?;
    let desc = descriptor_body(&mut r)?;
    r.finish()?;
    Ok(desc)
}

fn descriptor_body(r: &mut Reader) -> Result<MlhDescriptor> {
    let n = r.usize()?;
    let k = r.usize()?;
    let view = match r.u8()? {
        0 => ViewDirection::PosX,
        1 => ViewDirection::PosY,
        2 => ViewDirection::PosZ,
        3 => ViewDirection::Custom([r.f32()? as f64, r.f32()? as f64, r.f32()? as f64]),
        tag => return Err(Error::InvalidData(format!("unknown view tag {tag}"))),
    };
    let count = n
        .checked_mul(n)
        .and_then(|v| v.checked_mul(k))
        .ok_or_else(|| Error::InvalidData(format!("N={n}, k={k} overflows")))?;
    let remaining = r.bytes.len() - r.pos;
    if count.checked_mul(4).is_none_or(|b| b > remaining) {
        return Err(Error::LengthMismatch(format!(
            "payload needs {count} floats, {remaining} bytes left"
        )));
    }
    let payload = r.take(count * 4)?;
    let grid: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(bad) = grid.iter().find(|h| !h.is_finite()) {
        return Err(Error::InvalidData(format!("non-finite height {bad}")));
    }
    MlhDescriptor::from_grid(n, k, view, grid)
}

pub fn save_descriptor(path: &Path, desc: &MlhDescriptor) -> Result<()> {
    write_file(path, &write_descriptor(desc))
}

pub fn load_descriptor(path: &Path) -> Result<MlhDescriptor> {
    read_descriptor(&read_file(path)?).map_err(|e| e.with_path(path))
}

// ---- datasets ----

/// `N`, `k`, class names, then per record: id, label, split byte and the
/// three view blobs.
pub fn write_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC);
    w.u32(ds.n);
    w.u32(ds.k);
    w.u32(ds.class_names.len());
    ds.class_names.iter().for_each(|c| w.str(c));
    w.u32(ds.records.len());
    for rec in &ds.records {
        w.str(&rec.id);
        w.u32(rec.label);
        w.u8(match rec.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        for view in rec.bundle.views() {
            w.blob(&write_descriptor(view));
        }
    }
    w.buf
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC)?;
    let n = r.usize()?;
    let k = r.usize()?;
    let classes = r.usize()?;
    let class_names = (0..classes).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let count = r.usize()?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.str()?;
        let label = r.usize()?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(Error::InvalidData(format!("bad split byte {other}"))),
        };
        let views = [
            read_descriptor(r.blob()?)?,
            read_descriptor(r.blob()?)?,
            read_descriptor(r.blob()?)?,
        ];
        records.push(Record {
            id,
            label,
            split,
            bundle: MultiViewBundle::new(views)?,
        });
    }
    r.finish()?;
    let ds = Dataset {
        class_names,
        n,
        k,
        records,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_file(path, &write_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&read_file(path)?).map_err(|e| e.with_path(path))
}

// ---- checkpoints ----

fn write_tensor<T: Scalar>(w: &mut Writer, t: &Tensor<T>) {
    w.u32(t.shape().len());
    t.shape().iter().for_each(|&d| w.u32(d));
    t.data().iter().for_each(|&v| v.write_le(&mut w.buf));
}

fn read_tensor<T: Scalar>(r: &mut Reader) -> Result<Tensor<T>> {
    let ndim = r.usize()?;
    if ndim == 0 || ndim > 8 {
        return Err(Error::InvalidData(format!("tensor rank {ndim}")));
    }
    let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidData(format!("tensor shape {shape:?} overflows")))?;
    let bytes = r.take(
        count
            .checked_mul(T::BYTES)
            .ok_or_else(|| Error::InvalidData("tensor too large".into()))?,
    )?;
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

fn write_layer<T: Scalar>(w: &mut Writer, layer: &Layer<T>) {
    match layer {
        Layer::Conv2d(c) => {
            w.u8(TAG_CONV);
            w.u32(c.stride);
            w.u32(c.padding);
            w.u8(c.bias.is_some() as u8);
            write_tensor(w, &c.weight.value);
            if let Some(b) = &c.bias {
                write_tensor(w, &b.value);
            }
        }
        Layer::BatchNorm2d(bn) => {
            w.u8(TAG_BATCH_NORM);
            w.f64(bn.eps);
            w.f64(bn.momentum);
            for t in [&bn.gamma.value, &bn.beta.value, &bn.running_mean, &bn.running_var] {
                write_tensor(w, t);
            }
        }
        Layer::Relu => w.u8(TAG_RELU),
        Layer::MaxPool2 => w.u8(TAG_MAXPOOL),
        Layer::Flatten => w.u8(TAG_FLATTEN),
        Layer::Linear(l) => {
            w.u8(TAG_LINEAR);
            write_tensor(w, &l.weight.value);
            write_tensor(w, &l.bias.value);
        }
    }
}

fn read_layer<T: Scalar>(r: &mut Reader) -> Result<Layer<T>> {
    Ok(match r.u8()? {
        TAG_CONV => {
            let stride = r.usize()?;
            let padding = r.usize()?;
            let has_bias = r.bool()?;
            let weight = read_tensor(r)?;
            if has_bias {
                Layer::Conv2d(Conv2d::from_params(weight, read_tensor(r)?, stride, padding)?)
            } else {
                let out = weight.shape().first().copied().unwrap_or(0);
                let zeros = Tensor::zeros(&[out.max(1)]);
                Layer::Conv2d(Conv2d::from_params(weight, zeros, stride, padding)?.without_bias())
            }
        }
        TAG_BATCH_NORM => {
            let eps = r.f64()?;
            let momentum = r.f64()?;
            let gamma: Tensor<T> = read_tensor(r)?;
            let beta = read_tensor(r)?;
            let running_mean = read_tensor(r)?;
            let running_var = read_tensor(r)?;
            let channels = gamma.len();
            for t in [&beta, &running_mean, &running_var] {
                if t.shape() != [channels] {
                    return Err(Error::InvalidData("batch-norm tensor shapes differ".into()));
                }
            }
            let mut bn = BatchNorm2d::new(channels, eps, momentum);
            bn.gamma = Param::new(gamma);
            bn.beta = Param::new(beta);
            bn.running_mean = running_mean;
            bn.running_var = running_var;
            Layer::BatchNorm2d(bn)
        }
        TAG_RELU => Layer::Relu,
        TAG_MAXPOOL => Layer::MaxPool2,
        TAG_FLATTEN => Layer::Flatten,
        TAG_LINEAR => Layer::Linear(Linear::from_params(read_tensor(r)?, read_tensor(r)?)?),
        tag => return Err(Error::InvalidData(format!("unknown layer tag {tag}"))),
    })
}

/// Config block, then each sequence (branches, merge if any, head) as a
/// layer count followed by tagged layers. The element size is recorded so
/// an `f64` checkpoint is not misread as `f32`.
pub fn write_checkpoint<T: Scalar>(net: &MultiViewNetwork<T>) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u8(T::BYTES as u8);
    let c = &net.config;
    w.u8(c.shared as u8);
    w.u8(match c.merge {
        MergeKind::ElementwiseMax => 0,
        MergeKind::ConcatConv => 1,
    });
    for v in [c.classes, c.n, c.k, c.width, c.hidden, c.blocks] {
        w.u32(v);
    }
    w.u8(c.expand_init as u8);
    for seq in net.sequences() {
        w.u32(seq.layers.len());
        seq.layers.iter().for_each(|l| write_layer(&mut w, l));
    }
    w.buf
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<MultiViewNetwork<T>> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let elem = r.u8()? as usize;
    if elem != T::BYTES {
        return Err(Error::InvalidData(format!(
            "checkpoint stores {elem}-byte floats, expected {}",
            T::BYTES
        )));
    }
    let shared = r.bool()?;
    let merge = match r.u8()? {
        0 => MergeKind::ElementwiseMax,
        1 => MergeKind::ConcatConv,
        other => return Err(Error::InvalidData(format!("unknown merge tag {other}"))),
    };
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let [classes, n, k, width, hidden, blocks] = dims;
    let config = MultiViewConfig {
        shared,
        merge,
        classes,
        n,
        k,
        width,
        hidden,
        blocks,
        expand_init: r.bool()?,
    };
    config.validate()?;

    let mut read_seq = || -> Result<Sequential<T>> {
        let count = r.usize()?;
        let layers = (0..count).map(|_| read_layer(&mut r)).collect::<Result<_>>()?;
        Ok(Sequential::new(layers))
    };
    let branches = if shared {
        Branches::Shared(read_seq()?)
    } else {
        Branches::Independent(Box::new([read_seq()?, read_seq()?, read_seq()?]))
    };
    let merge_seq = match merge {
        MergeKind::ElementwiseMax => None,
        MergeKind::ConcatConv => Some(read_seq()?),
    };
    let head = read_seq()?;
    r.finish()?;
    let net = MultiViewNetwork {
        config,
        branches,
        merge: merge_seq,
        head,
    };
    let audit = net.shape_audit()?;
    if audit.logits != [1, classes] {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint layers produce {:?} logits for {classes} classes",
            audit.logits
        )));
    }
    Ok(net)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, net: &MultiViewNetwork<T>) -> Result<()> {
    write_file(path, &write_checkpoint(net))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<MultiViewNetwork<T>> {
    read_checkpoint(&read_file(path)?).map_err(|e| e.with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::INF_SENTINEL;
    use crate::multiview::MergeVariant;

    #[test]
    fn empty_descriptor_is_145_bytes() {
        let d = MlhDescriptor::empty(4, 2, ViewDirection::PosX);
        let bytes = write_descriptor(&d);
        assert_eq!(bytes.len(), 145);
        assert_eq!(&bytes[..4], b"MLHD");
        let back = read_descriptor(&bytes).unwrap();
        assert_eq!(back, d);
        assert!(back.grid().iter().all(|&h| h == INF_SENTINEL));
    }

    #[test]
    fn descriptor_errors() {
        let bytes = write_descriptor(&MlhDescriptor::empty(4, 2, ViewDirection::PosZ));
        assert!(matches!(
            read_descriptor(&bytes[..bytes.len() - 3]),
            Err(Error::LengthMismatch(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(read_descriptor(&v2), Err(Error::VersionUnsupported(2))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_descriptor(&bad), Err(Error::BadMagic { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(read_descriptor(&extra), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn custom_view_round_trips_after_first_write() {
        let v = ViewDirection::custom([0.6, 0.0, 0.8]).unwrap();
        let d = MlhDescriptor::empty(2, 1, v);
        let bytes = write_descriptor(&d);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 1 + 12 + 16);
        let once = read_descriptor(&bytes).unwrap();
        assert_eq!(write_descriptor(&once), bytes);
    }

    #[test]
    fn checkpoint_round_trip_every_variant() {
        for variant in MergeVariant::ALL {
            let mut config = MultiViewConfig::new(variant, 3, 8, 2);
            config.width = 4;
            config.hidden = 6;
            config.blocks = 2;
            let net = MultiViewNetwork::<f32>::build(config, 11).unwrap();
            let bytes = write_checkpoint(&net);
            let back: MultiViewNetwork<f32> = read_checkpoint(&bytes).unwrap();
            assert_eq!(write_checkpoint(&back), bytes);
            assert_eq!(back.params().len(), net.params().len());
            for (a, b) in back.params().iter().zip(net.params()) {
                assert!(a.value.bitwise_eq(&b.value));
            }
            assert!(read_checkpoint::<f64>(&bytes).is_err());
        }
    }
}
