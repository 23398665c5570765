//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SGNK" | u32 version | u32 len, JSON ModelConfig | u64 step | u32 count
//! count × ( u32 len, name | u8 dtype | u32 rank | rank × u64 dim | payload )
//! u32 CRC32 of everything before it
//! ```
//!
//! Batch-norm running statistics are stored as `<layer>.running_mean` and
//! `<layer>.running_var` records next to the parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{RunningStats, Tensor};

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGNK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[S]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(S::DTYPE.tag());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for &v in data {
        v.write_le(out);
    }
}

impl<S: Scalar> Model<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&self.config)?;
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        put_u64(&mut out, self.step);
        put_u32(&mut out, (self.params.len() + 2 * self.running.len()) as u32);
        for (name, t) in &self.params {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        for (name, s) in &self.running {
            put_tensor(&mut out, &format!("{name}.running_mean"), &[s.mean.len()], &s.mean);
            put_tensor(&mut out, &format!("{name}.running_var"), &[s.var.len()], &s.var);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    /// CRC32 of the serialized checkpoint body, the value stored in its
    /// trailer.
    pub fn checksum(&self) -> Result<u32> {
        let bytes = self.to_bytes()?;
        Ok(crc32fast::hash(&bytes[..bytes.len() - 4]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let json_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Integrity(format!("bad config block: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors: IndexMap<String, Tensor<S>> = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Integrity(format!("unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let width = dtype.size_in_bytes();
            let raw = r.take(numel.checked_mul(width).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(width)
                .map(|c| match dtype {
                    DType::F32 => S::of(f64::from(f32::read_le(c))),
                    DType::F64 => S::of(f64::read_le(c)),
                })
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Integrity(format!("duplicate tensor {name:?}")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after tensor records".into()));
        }
        let mut params = IndexMap::new();
        let mut running: IndexMap<String, RunningStats<S>> = IndexMap::new();
        for (name, t) in tensors {
            if let Some(layer) = name.strip_suffix(".running_mean") {
                running.entry(layer.to_string()).or_insert_with(|| RunningStats::new(0)).mean = t.into_data();
            } else if let Some(layer) = name.strip_suffix(".running_var") {
                running.entry(layer.to_string()).or_insert_with(|| RunningStats::new(0)).var = t.into_data();
            } else {
                params.insert(name, t);
            }
        }
        Model::from_parts(config, params, running, step)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Integrity("checkpoint truncated".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model.to_bytes()?)
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes)
}
