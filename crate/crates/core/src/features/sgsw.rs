//! SGSW: a flat little-endian container of named float32 tensors.
//!
//! Layout: `"SGSW"`, u32 version (1), u32 tensor count, then per tensor a u16
//! name length, the UTF-8 name, a u8 rank, u32 dims and row-major f32 data.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGSW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SgswError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated while reading {0}")]
    Truncated(String),
    #[error("tensor name is not UTF-8 (entry {0})")]
    Name(usize),
    #[error("tensor {name}: expected shape {expected:?}, got {got:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("unexpected tensor {0}")]
    Unexpected(String),
    #[error("duplicate tensor {0}")]
    Duplicate(String),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SgswError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| SgswError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, SgswError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses every tensor in file order.
pub fn read_sgsw(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, SgswError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "header")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(SgswError::Magic(magic));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(SgswError::Version(version));
    }
    let count = r.u32("header")? as usize;
    let mut out: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count.min(1024));
    for entry in 0..count {
        let what = format!("entry {entry}");
        let len = u16::from_le_bytes(r.take(2, &what)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| SgswError::Name(entry))?
            .to_string();
        let ndim = r.take(1, &name)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32(&name)? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| SgswError::Truncated(name.clone()))?, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.iter().any(|(existing, _)| *existing == name) {
            return Err(SgswError::Duplicate(name));
        }
        let t = Tensor::new(dims, data).expect("dims match data length");
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_sgsw<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let items: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_sgsw(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>, SgswError> {
    read_sgsw(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let a = Tensor::new([2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap();
        let b = Tensor::new([4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let bytes = write_sgsw([("a", &a), ("bias", &b)]);
        let back = read_sgsw(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1].1.shape(), &[4]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let mut bytes = write_sgsw([("w", &t)]);
        assert!(matches!(read_sgsw(&bytes[..bytes.len() - 1]), Err(SgswError::Truncated(n)) if n == "w"));
        bytes[0] = b'X';
        assert!(matches!(read_sgsw(&bytes), Err(SgswError::Magic(_))));
    }
}
