//! Binary tensor-list files for decoder/mapping weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "IRWT"
//! version u32      currently 1
//! count   u32      number of tensors
//! reserved u32     must be 0
//! per tensor:
//!   rank  u32
//!   dims  u32 × rank
//!   data  f64 × prod(dims)
//! ```
//!
//! The reader is strict: unknown versions, non-zero reserved words, dims
//! that overflow, non-finite values, or trailing bytes are all errors. It
//! must stay panic-free on arbitrary input — it is fuzzed.

use crate::autodiff::Array;
use crate::error::{Error, Result};
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"IRWT";
const VERSION: u32 = 1;
/// Caps keeping a hostile header from asking for absurd allocations.
const MAX_TENSORS: u32 = 1024;
const MAX_RANK: u32 = 8;
const MAX_DIM: u32 = 1 << 20;
const MAX_TOTAL_ELEMENTS: u64 = 1 << 26;

pub fn write_tensors<W: Write>(mut out: W, tensors: &[Array]) -> Result<()> {
    if tensors.len() as u64 > MAX_TENSORS as u64 {
        return Err(Error::format(
            "weights",
            format!("too many tensors to serialize: {}", tensors.len()),
        ));
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            if d as u64 > MAX_DIM as u64 {
                return Err(Error::format("weights", format!("dimension {d} too large")));
            }
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<Array>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_tensors(&bytes)
}

/// Parse a complete in-memory weights file.
pub fn parse_tensors(bytes: &[u8]) -> Result<Vec<Array>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format("weights", "bad magic (not a weights file)".to_string()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format("weights", format!("unsupported version {version}")));
    }
    let count = cur.u32()?;
    if count > MAX_TENSORS {
        return Err(Error::format("weights", format!("tensor count {count} exceeds limit")));
    }
    let reserved = cur.u32()?;
    if reserved != 0 {
        return Err(Error::format("weights", "reserved header word must be zero".to_string()));
    }
    let mut total: u64 = 0;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let rank = cur.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format("weights", format!("tensor {i}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = cur.u32()?;
            if d == 0 || d > MAX_DIM {
                return Err(Error::format("weights", format!("tensor {i}: dimension {d} out of range")));
            }
            elems = elems.saturating_mul(d as u64);
            shape.push(d as usize);
        }
        total = total.saturating_add(elems);
        if total > MAX_TOTAL_ELEMENTS {
            return Err(Error::format("weights", "total element count exceeds limit".to_string()));
        }
        let raw = cur.take(elems as usize * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size")))
            .collect();
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::format("weights", format!("tensor {i}: non-finite value {bad}")));
        }
        tensors.push(Array::new(shape, data).expect("shape consistent with data"));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            "weights",
            format!("{} trailing bytes after last tensor", bytes.len() - cur.pos),
        ));
    }
    Ok(tensors)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("weights", "unexpected end of file".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("slice length")))
    }
}

pub fn save_to_path(path: &std::path::Path, tensors: &[Array]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(file), tensors)
}

pub fn load_from_path(path: &std::path::Path) -> Result<Vec<Array>> {
    let file = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Array> {
        vec![
            Array::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-9, 7.0]).unwrap(),
            Array::new(vec![4], vec![0.5; 4]).unwrap(),
        ]
    }

    #[test]
    fn roundtrip_preserves_shapes_and_bits() {
        let tensors = sample();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        let back = parse_tensors(&buf).unwrap();
        assert_eq!(back.len(), tensors.len());
        for (a, b) in tensors.iter().zip(back.iter()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        buf[0] = b'X';
        assert!(matches!(parse_tensors(&buf).unwrap_err(), Error::FileFormat { .. }));
    }

    #[test]
    fn rejects_wrong_version() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        buf[4] = 9;
        assert!(parse_tensors(&buf).is_err());
    }

    #[test]
    fn rejects_truncation_at_every_length() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        for cut in 0..buf.len() {
            assert!(
                parse_tensors(&buf[..cut]).is_err(),
                "truncated file of {cut} bytes must not parse"
            );
        }
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        buf.push(0);
        assert!(parse_tensors(&buf).is_err());
    }

    #[test]
    fn rejects_non_finite_values() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[Array::new(vec![1], vec![1.0]).unwrap()]).unwrap();
        let n = buf.len();
        buf[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(parse_tensors(&buf).is_err());
    }

    #[test]
    fn rejects_oversized_header_claims() {
        // Header claiming 2^31 tensors must fail fast, not allocate.
        let mut buf = Vec::new();
        buf.extend_from_slice(b"IRWT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(1u32 << 31).to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        assert!(parse_tensors(&buf).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.irwt");
        save_to_path(&path, &sample()).unwrap();
        let back = load_from_path(&path).unwrap();
        assert_eq!(back.len(), 2);
    }
}
