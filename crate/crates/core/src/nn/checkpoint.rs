//! Parameter checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GVCKPT01"
//! meta_len   u32      length of the metadata block
//! meta       bytes    UTF-8 text (JSON model configuration, may be empty)
//! count      u32      number of parameters
//! repeated `count` times:
//!   name_len u32
//!   name     bytes    UTF-8
//!   rows     u64
//!   cols     u64
//!   data     rows*cols f64, row-major, IEEE-754 bit patterns
//! ```
//!
//! Values are stored as raw bit patterns, so a write/read cycle is bit-exact
//! (including NaN payloads and signed zeros).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GVCKPT01";

pub fn encode(meta: &str, params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + meta.len() + params.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
        for x in value.iter() {
            buf.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, ParamSet)> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if params.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        params.add(name, value);
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, params))
}

pub fn save(path: &Path, meta: &str, params: &ParamSet) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(meta, params))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(String, ParamSet)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
