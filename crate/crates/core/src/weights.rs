//! Binary weight files.
//!
//! Layout, all integers little-endian:
//! `"CADW"`, version `u32`, tensor count `u32`, then per tensor a `u16` name
//! length, the UTF-8 name, a dtype tag `u8` (0 = f32, 1 = f64), rank `u8`,
//! `rank` extents as `u32`, and the row-major payload.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"CADW";
pub const VERSION: u32 = 1;

fn check_unique(named: &[(String, Tensor)]) -> Result<()> {
    let mut seen = HashSet::with_capacity(named.len());
    for (name, _) in named {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
    }
    Ok(())
}

fn header(count: usize) -> Result<Vec<u8>> {
    let count = u32::try_from(count).map_err(|_| Error::Format("too many tensors".into()))?;
    let mut out = Vec::with_capacity(12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    Ok(out)
}

/// Encodes one tensor record.
fn record(name: &str, tensor: &Tensor) -> Result<Vec<u8>> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name:?}")))?;
    let rank = u8::try_from(tensor.rank()).map_err(|_| Error::Format(format!("rank too large for {name:?}")))?;
    let width = match tensor.dtype() {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(4 + name.len() + 4 * tensor.rank() + width * tensor.numel());
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tensor.dtype().tag());
    out.push(rank);
    for &e in tensor.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent too large for {name:?}")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    match tensor.dtype() {
        DType::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => tensor.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Writes the encoded file to `w`.
pub fn write_weights<W: Write>(mut w: W, named: &[(String, Tensor)]) -> Result<()> {
    check_unique(named)?;
    w.write_all(&header(named.len())?)?;
    for (name, t) in named {
        w.write_all(&record(name, t)?)?;
    }
    Ok(())
}

pub fn encode_weights(named: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_weights(&mut out, named)?;
    Ok(out)
}

pub fn save_weights(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_weights(&mut w, named)?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format(format!("truncated file while reading {what}"))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_weights<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { inner: r };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic: not a weight file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("{name:?}: unknown dtype tag {tag}")))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let payload = r.bytes(numel * width, "payload")?;
        let data: Vec<f64> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        };
        let t = Tensor::new(&shape, data, dtype).map_err(|e| Error::Format(format!("{name:?}: {e}")))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    read_weights(bytes)
}

pub fn load_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path)?;
    read_weights(std::io::BufReader::new(file))
}

/// SHA-256 of the encoded file, computed record by record without building
/// the whole buffer. Hex encoded.
pub fn checksum(named: &[(String, Tensor)]) -> Result<String> {
    check_unique(named)?;
    let mut h = Sha256::new();
    h.update(header(named.len())?);
    for (name, t) in named {
        h.update(record(name, t)?);
    }
    Ok(hex(&h.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
