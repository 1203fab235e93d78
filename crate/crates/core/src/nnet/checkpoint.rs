//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DUSTCKPT" | u32 version | u32 config_len | config JSON
//! u32 n_tensors
//! repeated: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 values[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, NnetError, Params};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DUSTCKPT";

pub fn checkpoint_bytes(params: &Params) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &Params, path: &Path) -> Result<(), NnetError> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            NnetError::MalformedCheckpoint(format!("truncated at byte {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Params, NnetError> {
    let bad = |m: String| NnetError::MalformedCheckpoint(m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("missing magic header".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnetError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len)?).map_err(|e| bad(format!("config: {e}")))?;
    let mut params = Params::init(&config, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let n_tensors = r.u32()? as usize;
    if n_tensors != expected.len() {
        return Err(bad(format!("{n_tensors} tensors, config implies {}", expected.len())));
    }
    let mut loaded: Vec<Vec<f32>> = Vec::with_capacity(n_tensors);
    for (name, shape) in &expected {
        let name_len = r.u32()? as usize;
        let found = std::str::from_utf8(r.take(name_len)?).map_err(|e| bad(e.to_string()))?;
        if found != name {
            return Err(bad(format!("expected tensor {name}, found {found}")));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(bad(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        loaded.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for (dst, src) in params.tensors_mut().into_iter().zip(loaded) {
        dst.copy_from_slice(&src);
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<Params, NnetError> {
    parse_checkpoint(&fs::read(path)?)
}
