//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AUDA" u32:version u8:kind
//! u32:len arch-json  u32:num_classes
//! u32:count  count × record
//! kind 1 only: u64:adam_step u64:epoch  count × record (first moments)  count × record (second moments)
//! u32:len config-toml
//! record = u32:len name  u8:dtype  u32:ndim  ndim × u64:dim  raw values
//! ```
//!
//! Records appear in lexicographic path order so that saving the same state twice
//! produces identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ArchitectureDescriptor, DetectorParams};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 4] = b"AUDA";
pub const VERSION: u32 = 1;

const KIND_MODEL: u8 = 0;
const KIND_TRAINING: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("{0} trailing bytes after the checkpoint payload")]
    TrailingBytes(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: DetectorParams<T>,
    pub optimizer: Option<OptimizerState<T>>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Resolved configuration the state was produced with, as TOML.
    pub config: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_str(out, name);
    out.push(T::DTYPE.tag());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for &v in data {
        v.write_le(out);
    }
}

pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(if ckpt.optimizer.is_some() { KIND_TRAINING } else { KIND_MODEL });
    put_str(&mut out, &serde_json::to_string(&ckpt.params.arch).expect("descriptor serializes"));
    put_u32(&mut out, ckpt.params.num_classes as u32);
    put_u32(&mut out, ckpt.params.tensors.len() as u32);
    for (name, t) in &ckpt.params.tensors {
        put_record(&mut out, name, t.shape(), t.data());
    }
    if let Some(opt) = &ckpt.optimizer {
        put_u64(&mut out, opt.step);
        put_u64(&mut out, ckpt.epoch as u64);
        for moments in [&opt.m, &opt.v] {
            for (name, t) in &ckpt.params.tensors {
                put_record(&mut out, name, t.shape(), &moments[name]);
            }
        }
    } else {
        debug_assert_eq!(ckpt.epoch, 0, "model-only checkpoints carry no epoch");
    }
    put_str(&mut out, &ckpt.config);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
    }

    fn record<T: Scalar>(&mut self) -> Result<(String, Vec<usize>, Vec<T>), CheckpointError> {
        let name = self.string("record name")?;
        let tag = self.u8("record dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: unknown dtype tag {tag}")))?;
        let ndim = self.u32("record rank")? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Corrupt(format!("{name}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64("record shape")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflow")))?;
        let bytes = n.checked_mul(dtype.size_of()).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: size overflow")))?;
        let raw = self.take(bytes, "record data")?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f32(f32::read_le(c)).unwrap()).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c)).unwrap()).collect(),
        };
        Ok((name, shape, data))
    }
}

/// Parses a checkpoint. Values stored in another precision are converted to `T`.
pub fn decode<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let kind = r.u8("kind")?;
    if kind != KIND_MODEL && kind != KIND_TRAINING {
        return Err(CheckpointError::Corrupt(format!("unknown kind {kind}")));
    }
    let arch_json = r.string("architecture")?;
    let arch: ArchitectureDescriptor = serde_json::from_str(&arch_json).map_err(|e| CheckpointError::Corrupt(format!("architecture: {e}")))?;
    let num_classes = r.u32("num_classes")? as usize;
    let count = r.u32("parameter count")? as usize;
    let mut tensors = BTreeMap::new();
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, shape, data) = r.record::<T>()?;
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?.with_requires_grad(true);
        order.push(name.clone());
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
        }
    }
    let expected = arch.layout(num_classes);
    if expected.len() != tensors.len() || expected.iter().any(|(p, s)| tensors.get(p).map(|t| t.shape() != s.as_slice()).unwrap_or(true)) {
        return Err(CheckpointError::Corrupt("parameters do not match the stored architecture".into()));
    }
    let (optimizer, epoch) = if kind == KIND_TRAINING {
        let step = r.u64("optimizer step")?;
        let epoch = r.u64("epoch")? as usize;
        let mut moments = [BTreeMap::new(), BTreeMap::new()];
        for m in &mut moments {
            for name in &order {
                let (n, shape, data) = r.record::<T>()?;
                if &n != name || shape != tensors[name].shape() {
                    return Err(CheckpointError::Corrupt(format!("moment record {n} does not match parameter {name}")));
                }
                m.insert(n, data);
            }
        }
        let [m, v] = moments;
        (Some(OptimizerState { step, m, v }), epoch)
    } else {
        (None, 0)
    };
    let config = r.string("config")?;
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(Checkpoint {
        params: DetectorParams { arch, num_classes, tensors },
        optimizer,
        epoch,
        config,
    })
}

pub fn save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<(), CheckpointError> {
    let bytes = encode(ckpt);
    // write-then-rename so a crash never leaves a half-written checkpoint behind
    let tmp = path.with_extension("tmp");
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
