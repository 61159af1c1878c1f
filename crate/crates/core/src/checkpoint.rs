//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CIGN" | version u32 | fingerprint [u8; 32] | iteration u64 | count u32
//! count × { name_len u32 | name utf-8 | dtype u8 | ndim u32 | dims u64×ndim | offset u64 }
//! payload: raw little-endian tensor data, offsets relative to payload start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::models::{to_hex, Fingerprint, NetworkParams};

pub const MAGIC: &[u8; 4] = b"CIGN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(a) => a.len() * 4,
            TensorData::F64(a) => a.len() * 8,
        }
    }
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub fingerprint: Fingerprint,
    pub iteration: u64,
    pub tensors: BTreeMap<String, TensorData>,
}

pub fn encode(c: &Container) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    head.extend_from_slice(&c.fingerprint);
    head.extend_from_slice(&c.iteration.to_le_bytes());
    head.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in &c.tensors {
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.push(t.dtype());
        head.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            head.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        t.write_payload(&mut payload);
    }
    head.extend_from_slice(&payload);
    head
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Container> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("missing CIGN magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let fingerprint: Fingerprint = r.take(32)?.try_into().expect("32 bytes");
    let iteration = r.u64()?;
    let count = r.u32()? as usize;
    struct Entry {
        name: String,
        dtype: u8,
        shape: Vec<usize>,
        offset: usize,
    }
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?;
        let dtype = r.u8()?;
        if dtype > 1 {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` has rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        entries.push(Entry { name, dtype, shape, offset });
    }
    let payload = &buf[r.pos..];
    let mut tensors = BTreeMap::new();
    for e in entries {
        let n = e.shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let width = if e.dtype == 0 { 4 } else { 8 };
        let bytes = n.and_then(|n| n.checked_mul(width));
        let slice = bytes
            .and_then(|b| e.offset.checked_add(b).map(|end| (b, end)))
            .filter(|(_, end)| *end <= payload.len())
            .map(|(_, end)| &payload[e.offset..end])
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{}` extends past end of file", e.name)))?;
        let data = if e.dtype == 0 {
            let v: Vec<f32> = slice.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
            TensorData::F32(ArrayD::from_shape_vec(IxDyn(&e.shape), v).expect("size checked"))
        } else {
            let v: Vec<f64> = slice.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            TensorData::F64(ArrayD::from_shape_vec(IxDyn(&e.shape), v).expect("size checked"))
        };
        if tensors.insert(e.name.clone(), data).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor `{}`", e.name)));
        }
    }
    let expected_payload: usize = tensors.values().map(TensorData::byte_len).sum();
    if payload.len() != expected_payload {
        return Err(Error::CorruptCheckpoint(format!(
            "payload holds {} bytes but the table describes {expected_payload}",
            payload.len()
        )));
    }
    Ok(Container { fingerprint, iteration, tensors })
}

pub fn save_container(path: &Path, c: &Container) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(c)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path) -> Result<Container> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        Error::CorruptCheckpoint(m) => Error::CorruptCheckpoint(format!("{}: {m}", path.display())),
        Error::IncompatibleCheckpoint(m) => Error::IncompatibleCheckpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn params_to_container(params: &NetworkParams) -> Container {
    Container {
        fingerprint: params.fingerprint,
        iteration: params.iteration,
        tensors: params.tensors.iter().map(|(k, v)| (k.clone(), TensorData::F32(v.clone()))).collect(),
    }
}

pub fn container_to_params(c: Container) -> Result<NetworkParams> {
    let mut tensors = BTreeMap::new();
    for (name, t) in c.tensors {
        match t {
            TensorData::F32(a) => {
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::CorruptCheckpoint(format!("tensor `{name}` holds non-finite values")));
                }
                tensors.insert(name, a);
            }
            TensorData::F64(_) => {
                return Err(Error::IncompatibleCheckpoint(format!("tensor `{name}` is f64; network weights are f32")));
            }
        }
    }
    Ok(NetworkParams { tensors, fingerprint: c.fingerprint, iteration: c.iteration })
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<()> {
    save_container(path, &params_to_container(params))
}

/// Load network weights; when `expected` is given the stored fingerprint
/// must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&Fingerprint>) -> Result<NetworkParams> {
    let c = load_container(path)?;
    if let Some(fp) = expected {
        if &c.fingerprint != fp {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} was written for config {}, expected {}",
                path.display(),
                to_hex(&c.fingerprint),
                to_hex(fp)
            )));
        }
    }
    container_to_params(c)
}
