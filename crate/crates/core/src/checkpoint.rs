//! Binary checkpoint encoding.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DGR1"
//! u32 fingerprint length, fingerprint bytes (UTF-8)
//! repeated until end of input:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u64 dims
//!   product(dims) × f64
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGR1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version `{0}`")]
    Version(String),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid UTF-8 in checkpoint at byte {0}")]
    Utf8(usize),
    #[error("invalid tensor record `{0}`")]
    Record(String),
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(fingerprint: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    put_str(&mut out, fingerprint);
    for (name, t) in store.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        core::str::from_utf8(raw)
            .map(String::from)
            .map_err(|_| CheckpointError::Utf8(at))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        if &magic[..3] == b"DGR" {
            return Err(CheckpointError::Version(String::from_utf8_lossy(magic).into()));
        }
        return Err(CheckpointError::BadMagic);
    }
    let fingerprint = r.string()?;
    let mut params: Vec<(String, Tensor)> = Vec::new();
    while r.pos < bytes.len() {
        let name = r.string()?;
        if params.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::Duplicate(name));
        }
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Record(name));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Record(name.clone()))?;
            len = len
                .checked_mul(d)
                .filter(|l| *l <= bytes.len() / 8)
                .ok_or(CheckpointError::Truncated(bytes.len()))?;
            shape.push(d);
        }
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Record(name.clone()))?;
        params.push((name, t));
    }
    Ok(Checkpoint { fingerprint, params })
}
