//! Tensor container file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "SUGARTNS"
//! version  u32       1
//! count    u32       number of entries
//! entry*   name_len u32 | name (UTF-8) | ndim u32 | dims u64 * ndim | values f64 * numel
//! ```
//!
//! Entries are written in ascending name order; values are raw IEEE-754 bits
//! so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"SUGARTNS";
const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &BTreeMap<String, Tensor>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parses a container; `origin` is only used in error messages.
pub fn read_tensors<R: Read>(mut r: R, origin: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bad = |reason: String| Error::Format { path: origin.to_path_buf(), reason };
    let io = |e: std::io::Error| bad(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(io)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r).map_err(io)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r).map_err(io)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_u64(&mut r).map_err(io)?.to_le_bytes()));
        }
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("entry {name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate entry {name}")));
        }
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(BufWriter::new(f), tensors).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(BufReader::new(f), path)
}
