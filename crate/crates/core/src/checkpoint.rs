//! Versioned binary checkpoints and the shared array serialization helpers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"WAMGCKPT"
//! version  u32      1
//! config   u64 length + UTF-8 JSON echo of the producing configuration
//! count    u64      number of parameters
//! entries  count ×  [ u64 name-len | name | u64 ndim | u64×ndim dims | f64×n data ]
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Round-trips are bit-exact: floats are moved as raw IEEE-754 bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Array;
use crate::params::ParamSet;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"WAMGCKPT";
const VERSION: u32 = 1;

// ---- array wire helpers (shared with the demo dataset format) ----

pub(crate) fn write_array(buf: &mut Vec<u8>, a: &Array) {
    buf.extend_from_slice(&(a.shape().len() as u64).to_le_bytes());
    for d in a.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for x in a.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn read_array(r: &mut impl Read) -> Result<Array> {
    let ndim = read_u64(r)? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated array payload: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array::from_vec(&shape, data)
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated integer: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated string: {e}")))?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
}

/// Write bytes to `path` atomically (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---- checkpoint save/load ----

pub fn save(path: &Path, config_json: &str, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    write_string(&mut buf, config_json);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, value) in params.iter() {
        write_string(&mut buf, name);
        write_array(&mut buf, value);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    atomic_write(path, &buf)
}

/// Read a checkpoint: `(config JSON echo, named arrays in stored order)`.
pub fn load(path: &Path) -> Result<(String, Vec<(String, Array)>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(Error::Checkpoint("integrity digest mismatch".into()));
    }
    let mut r = body;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint)".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)
        .map_err(|_| Error::Checkpoint("missing version".into()))?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = read_string(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let value = read_array(&mut r)?;
        out.push((name, value));
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((config, out))
}

/// Load values into an existing set; names and shapes must match exactly.
pub fn load_into(path: &Path, params: &mut ParamSet) -> Result<String> {
    let (config, entries) = load(path)?;
    if entries.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {}, model has {}",
            entries.len(),
            params.len()
        )));
    }
    for (name, value) in entries {
        let id = params
            .by_name(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        params.set(id, value)?;
    }
    Ok(config)
}
