//! Binary encoding of [`ModelParams`], byte-identical across platforms.
//!
//! Layout: `version: u8`, `entry_count: u32 LE`, then per entry
//! `name_len: u16 LE`, UTF-8 name bytes, `rank: u8`, `rank` dims as
//! `u32 LE`, and the row-major values as `f64 LE`. Decoding never panics on
//! malformed input: every read is bounds-checked and the result passes the
//! full [`ModelParams`] validation (unique names, shape products, finite
//! values) before it is returned.

use thiserror::Error;

use super::{ModelParams, ParamEntry};

pub const MODEL_CODEC_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("model bytes truncated")]
    Truncated,
    #[error("unsupported model codec version {0}")]
    Version(u8),
    #[error("trailing bytes after model payload")]
    TrailingBytes,
    #[error("invalid model payload: {0}")]
    Invalid(String),
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(MODEL_CODEC_VERSION);
    out.extend_from_slice(&(params.entries().len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams, CodecError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let version = cur.u8()?;
    if version != MODEL_CODEC_VERSION {
        return Err(CodecError::Version(version));
    }
    let n_entries = cur.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..n_entries {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CodecError::Invalid("entry name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = cur.u32()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| CodecError::Invalid("shape product overflows".into()))?;
            shape.push(d);
        }
        // Check the payload length before allocating, so a forged count
        // cannot force a huge allocation.
        let payload = cur.take(count.checked_mul(8).ok_or(CodecError::Truncated)?)?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        entries.push(ParamEntry::new(name, shape, values));
    }
    if cur.pos != bytes.len() {
        return Err(CodecError::TrailingBytes);
    }
    ModelParams::new(entries).map_err(|e| CodecError::Invalid(e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CodecError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
