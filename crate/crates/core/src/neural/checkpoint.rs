//! Binary checkpoint container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "PCKP"
//! version  u32      CHECKPOINT_VERSION
//! kind     str      model kind, e.g. "goalnet" (u32 length + UTF-8)
//! count    u32      number of tensors
//! count times:
//!   name   str
//!   rank   u32
//!   dims   rank × u64
//!   data   product(dims) × f64
//! ```
//!
//! Hyperparameters live next to the checkpoint in `<path>.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::binio::*;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: impl AsRef<Path>, kind: &str, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    write_u32(&mut w, CHECKPOINT_VERSION).map_err(io)?;
    write_str(&mut w, kind).map_err(io)?;
    write_u32(&mut w, store.len() as u32).map_err(io)?;
    for (name, t) in store.named() {
        write_str(&mut w, name).map_err(io)?;
        write_u32(&mut w, t.shape().len() as u32).map_err(io)?;
        for d in t.shape() {
            write_u64(&mut w, *d as u64).map_err(io)?;
        }
        for v in t.data() {
            write_f64(&mut w, *v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads all tensors, insisting on the expected `kind`.
pub fn load_checkpoint(path: impl AsRef<Path>, kind: &str) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let trunc = |e: std::io::Error| format(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r).map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(format(format!("unsupported checkpoint version {version}")));
    }
    let found = read_str(&mut r).map_err(trunc)?;
    if found != kind {
        return Err(format(format!("checkpoint holds a `{found}` model, expected `{kind}`")));
    }
    let count = read_u32(&mut r).map_err(trunc)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = read_str(&mut r).map_err(trunc)?;
        let rank = read_u32(&mut r).map_err(trunc)?;
        if rank > 8 {
            return Err(format(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(trunc)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(read_f64(&mut r).map_err(trunc)?);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}
