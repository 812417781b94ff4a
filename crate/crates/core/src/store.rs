//! Binary container for named `f64` arrays, shared by checkpoints and saved
//! datasets.
//!
//! Layout (all integers little-endian):
//! `b"MAMARRAY"`, `u32` format version, `u32` array count, then per array
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` values in
//! row-major order; finally the SHA-256 digest of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use mam_tape::{ParamSet, Tensor};
use ndarray::IxDyn;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MAMARRAY";
const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Version stamped into every manifest written by this crate.
pub const SCHEMA_VERSION: u32 = 1;

pub fn encode_arrays(arrays: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<ParamSet, String> {
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(format!("truncated: only {} bytes", bytes.len()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err("bad magic bytes".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch (truncated or modified)".into());
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unknown container format {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| "array name is not UTF-8")?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("array too large")?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_shape_vec(IxDyn(&shape), values).map_err(|e| e.to_string())?;
        out.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(format!("{} trailing bytes", body.len() - r.pos));
    }
    Ok(out)
}

pub fn write_arrays(path: &Path, arrays: &ParamSet) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_arrays(arrays))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads a manifest, rejecting any `schema_version` other than ours before
/// interpreting the remaining fields.
pub fn read_manifest<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::SchemaVersion {
                found: v as u32,
                expected: SCHEMA_VERSION,
            })
        }
        None => {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: "manifest has no schema_version".into(),
            })
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
