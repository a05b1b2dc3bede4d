//! `.tb` bundle container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "TBND"  u16 version
//! u32 metadata count   { u32 len, key bytes, u32 len, value bytes }*
//! u32 tensor count     { u32 len, name bytes, u8 precision, u8 rank, rank x u64 dims, payload }*
//! ```
//!
//! Precision tag 0 is binary32 and 1 is binary16; payloads are raw
//! little-endian element bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;

use super::{element_count, Precision, Tensor, TensorBundle, TensorData};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"TBND";
pub const BUNDLE_VERSION: u16 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Validation("string too long".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_bundle<W: Write>(b: &TensorBundle, mut w: W) -> Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;

    w.write_all(&(b.metadata().len() as u32).to_le_bytes())?;
    for (k, v) in b.metadata() {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }

    w.write_all(&(b.len() as u32).to_le_bytes())?;
    for t in b.tensors() {
        write_str(&mut w, t.name())?;
        w.write_all(&[t.precision().tag()])?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Validation(format!("tensor `{}` has rank > 255", t.name())))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match t.data() {
            TensorData::Single(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            TensorData::Half(v) => {
                let mut buf = Vec::with_capacity(v.len() * 2);
                for x in v {
                    buf.extend_from_slice(&x.to_bits().to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_bundle_file(b: &TensorBundle, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_bundle(b, BufWriter::new(f))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corruption(format!("truncated stream while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corruption(format!("{what} is not valid UTF-8")))
    }
}

pub fn read_bundle<R: Read>(mut r: R) -> Result<TensorBundle> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };

    let magic = c
        .take(4, "magic")
        .map_err(|_| Error::Format("stream too short for a bundle header".into()))?;
    if magic != BUNDLE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"TBND\"")));
    }
    let version = c.u16("version").map_err(|_| Error::Format("missing version".into()))?;
    if version != BUNDLE_VERSION {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }

    let mut bundle = TensorBundle::new();
    let meta_count = c.u32("metadata count")?;
    for _ in 0..meta_count {
        let k = c.string("metadata key")?;
        let v = c.string("metadata value")?;
        if bundle.metadata().contains_key(&k) {
            return Err(Error::Validation(format!("duplicate metadata key `{k}`")));
        }
        bundle.set_metadata(k, v);
    }

    let tensor_count = c.u32("tensor count")?;
    for _ in 0..tensor_count {
        let name = c.string("tensor name")?;
        let tag = c.u8("precision")?;
        let precision = Precision::from_tag(tag)
            .ok_or_else(|| Error::Corruption(format!("tensor `{name}` has unknown precision tag {tag}")))?;
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = c.u64("dimension")?;
            let d = usize::try_from(d).map_err(|_| Error::Corruption(format!("dimension {d} too large")))?;
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corruption(format!("tensor `{name}` shape overflows")))?;
        debug_assert_eq!(n, element_count(&shape));
        let bytes = n
            .checked_mul(precision.bytes_per_element())
            .ok_or_else(|| Error::Corruption(format!("tensor `{name}` payload overflows")))?;
        let payload = c.take(bytes, "tensor payload")?;
        let data = match precision {
            Precision::Single => TensorData::Single(
                payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
            ),
            Precision::Half => TensorData::Half(
                payload
                    .chunks_exact(2)
                    .map(|b| f16::from_bits(u16::from_le_bytes(b.try_into().unwrap())))
                    .collect(),
            ),
        };
        bundle.insert(Tensor::new(name, shape, data)?)?;
    }
    if c.pos != buf.len() {
        return Err(Error::Corruption(format!("{} trailing bytes after last tensor", buf.len() - c.pos)));
    }
    Ok(bundle)
}

pub fn read_bundle_file(path: impl AsRef<Path>) -> Result<TensorBundle> {
    let f = File::open(path)?;
    read_bundle(BufReader::new(f))
}
