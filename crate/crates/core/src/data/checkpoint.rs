//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LCMT" | u32 version | u64 meta_len | meta JSON | u32 crc(meta)
//! u32 n_records
//! per record: u32 name_len | name | u8 dtype | u32 ndim | u64 dims.. |
//!             payload | u32 crc(name..payload)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Element, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LCMT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub src_vocab_hash: String,
    pub tgt_vocab_hash: String,
    pub step: usize,
    pub seed: u64,
}

pub fn encode_checkpoint<T: Element>(params: &ParamStore<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corruption(format!("truncated: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corruption("length overflows usize".into()))
    }
}

/// Decodes a checkpoint. Stored values of another dtype are converted to
/// `T`; `f32` to `f64` and back is exact.
pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<(ParamStore<T>, CheckpointMeta)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c
        .take(4)
        .map_err(|_| Error::Format("file too short to be a checkpoint".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, not a checkpoint")));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version} is not supported (this build reads version {VERSION})"
        )));
    }
    let meta_len = c.len()?;
    let json = c.take(meta_len)?;
    if c.u32()? != crc32fast::hash(json) {
        return Err(Error::Corruption("metadata CRC mismatch".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| Error::Corruption(format!("metadata: {e}")))?;
    let n = c.u32()? as usize;
    let mut params = ParamStore::new();
    for r in 0..n {
        let start = c.pos;
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Corruption(format!("record {r}: name is not UTF-8")))?
            .to_string();
        let dtype =
            DType::from_tag(c.u8()?).ok_or_else(|| Error::Corruption(format!("record {name}: unknown dtype tag")))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Corruption(format!("record {name}: shape overflows")))?;
        let payload = c.take(numel)?;
        let crc = crc32fast::hash(&bytes[start..c.pos]);
        if c.u32()? != crc {
            return Err(Error::Corruption(format!("CRC mismatch in tensor {name}")));
        }
        let data: Vec<T> = payload
            .chunks_exact(dtype.size())
            .map(|b| match dtype {
                DType::F32 => T::lit(f32::read_le(b) as f64),
                DType::F64 => T::lit(f64::read_le(b)),
            })
            .collect();
        if params.id(&name).is_some() {
            return Err(Error::Corruption(format!("duplicate tensor {name}")));
        }
        params.insert(name, Tensor::new(&shape, data)?.with_requires_grad(true));
    }
    if c.pos != bytes.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((params, meta))
}

/// Writes through a temporary file and renames, so a failed save never
/// leaves a half-written checkpoint at `path`.
pub fn save_checkpoint<T: Element>(
    path: impl AsRef<Path>,
    params: &ParamStore<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, meta)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<(ParamStore<T>, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a model, requiring the stored tensors to match `config` when
/// given (otherwise the stored config is used).
pub fn load_model<T: Element>(
    path: impl AsRef<Path>,
    config: Option<ModelConfig>,
) -> Result<(Model<T>, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    let config = config.unwrap_or_else(|| meta.config.clone());
    Ok((Model::from_params(config, params)?, meta))
}
