//! Versioned binary checkpoint.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! b"EMBM" | u32 version | u32 meta_len | meta_len bytes of UTF-8 JSON
//! u32 tensor_count
//! repeated: u32 name_len | name | u32 ndim | ndim × u64 dims | numel × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"EMBM";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, meta_json: &str, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut buf, meta_json.as_bytes())?;
    buf.extend_from_slice(&u32_len(params.len())?.to_le_bytes());
    for (name, t) in params.iter() {
        put_bytes(&mut buf, name.as_bytes())?;
        buf.extend_from_slice(&u32_len(t.shape().len())?.to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::Format(format!("writing checkpoint: {e}")))
}

pub fn save(path: &Path, meta_json: &str, params: &ParamSet) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), meta_json, params)
}

/// Returns the metadata JSON and the tensors in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("not an EMBM checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta = cur.string()?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok((meta, tensors))
}

pub fn load(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    buf.extend_from_slice(&u32_len(b.len())?.to_le_bytes());
    buf.extend_from_slice(b);
    Ok(())
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::new(vec![2, 2], vec![0.1, -3.5e-300, 7.0, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        ps.add("b.c", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"x\":1}", &ps).unwrap();
        assert_eq!(&buf[..4], b"EMBM");
        let (meta, tensors) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(meta, "{\"x\":1}");
        assert_eq!(tensors.len(), 2);
        for ((name, t), (orig_name, orig)) in tensors.iter().zip(ps.iter()) {
            assert_eq!(name, orig_name);
            assert_eq!(t.shape(), orig.shape());
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let orig_bits: Vec<u64> = orig.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, orig_bits);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\x01\x00\x00\x00"[..]).is_err());
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[3])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{}", &ps).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
