//! Binary checkpoint, all integers little-endian:
//!
//! ```text
//! "PIER1"
//! u32 version
//! u32 D, u32 N_f, u32 N_d, u32 M, u32 B, u64 hash seed
//! u32 len, bytes       model config as JSON (hidden sizes, vocabularies, flags)
//! u32 tensor count
//! per tensor: u32 name len, name, u32 rank, u32 dims[rank], u64 byte offset
//! u64 payload bytes
//! payload: f32 values, tensors back to back in index order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{PierError, Result};
use crate::training::{ModelConfig, PierModel};

pub const MAGIC: &[u8; 5] = b"PIER1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u32,
    pub dim: u32,
    pub n_fields: u32,
    pub n_items: u32,
    pub history_len: u32,
    pub bits: u32,
    pub hash_seed: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn to_bytes(model: &PierModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, cfg.dim());
    put_u32(&mut out, cfg.n_fields());
    put_u32(&mut out, cfg.n_items());
    put_u32(&mut out, cfg.fpsm.history_len);
    put_u32(&mut out, cfg.fpsm.bits);
    out.extend_from_slice(&cfg.fpsm.hash_seed.to_le_bytes());
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u32(&mut out, model.store.len());
    let mut offset = 0u64;
    for p in model.store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.value.len() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for p in model.store.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PierError::Format(format!("header truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and cross-checks the header; returns it with the payload start.
pub fn read_header(buf: &[u8]) -> Result<(Header, usize)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(PierError::Format("bad magic, not a PIER1 checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(PierError::Format(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let dim = r.u32("D")?;
    let n_fields = r.u32("N_f")?;
    let n_items = r.u32("N_d")?;
    let history_len = r.u32("M")?;
    let bits = r.u32("B")?;
    let hash_seed = r.u64("hash seed")?;
    let json_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len, "config")?)
        .map_err(|e| PierError::Format(format!("model config: {e}")))?;
    let consistent = config.dim() == dim as usize
        && config.n_fields() == n_fields as usize
        && config.n_items() == n_items as usize
        && config.fpsm.history_len == history_len as usize
        && config.fpsm.bits == bits as usize
        && config.fpsm.hash_seed == hash_seed;
    if !consistent {
        return Err(PierError::Format("header fields disagree with the embedded model config".into()));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| PierError::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(PierError::Format(format!("tensor {name}: rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64("tensor offset")?;
        if offset != expected_offset {
            return Err(PierError::Format(format!("tensor {name}: offset {offset}, expected {expected_offset}")));
        }
        expected_offset += 4 * shape.iter().product::<usize>() as u64;
        tensors.push(TensorEntry { name, shape, offset });
    }
    let payload_len = r.u64("payload length")?;
    if payload_len != expected_offset {
        return Err(PierError::Format(format!(
            "payload length {payload_len} disagrees with tensor index total {expected_offset}"
        )));
    }
    Ok((
        Header {
            version,
            dim,
            n_fields,
            n_items,
            history_len,
            bits,
            hash_seed,
            config,
            tensors,
            payload_len,
        },
        r.pos,
    ))
}

pub fn from_bytes(buf: &[u8]) -> Result<PierModel> {
    let (header, start) = read_header(buf)?;
    let actual = (buf.len() - start) as u64;
    if actual != header.payload_len {
        return Err(PierError::Integrity {
            expected: header.payload_len,
            actual,
        });
    }
    let mut model = PierModel::new(header.config.clone())?;
    if header.tensors.len() != model.store.len() {
        return Err(PierError::Format(format!(
            "checkpoint holds {} tensors, model expects {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let payload = &buf[start..];
    for entry in &header.tensors {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| PierError::Format(format!("unknown tensor {}", entry.name)))?;
        let t = model.store.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(PierError::Format(format!(
                "tensor {}: shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let bytes = &payload[entry.offset as usize..entry.offset as usize + 4 * t.len()];
        for (v, c) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &PierModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| PierError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PierModel> {
    let buf = fs::read(path).map_err(|e| PierError::io(path, e))?;
    from_bytes(&buf)
}
