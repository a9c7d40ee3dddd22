//! Flat named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"AATT"  version:u32  count:u32
//! repeated count times:
//!     name_len:u32  name:utf8  rank:u32  dims:u32*rank  data:f64*product(dims)
//! ```

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"AATT";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Little-endian cursor that reports byte offsets in its errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "unexpected end of data, wanted {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(buf);
    decode_from(&mut r)
}

pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<ParamStore> {
    if r.bytes(4)? != ARCHIVE_MAGIC {
        r.pos -= 4;
        return r.fail("bad archive magic");
    }
    let version = r.u32()?;
    if version != ARCHIVE_VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported archive version {version}"));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let start = r.pos;
        let name = std::str::from_utf8(r.bytes(name_len)?).map_err(|_| Error::Format {
            offset: start,
            msg: "tensor name is not utf-8".into(),
        })?;
        let name = name.to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 2 {
            r.pos -= 4;
            return r.fail(format!("unsupported tensor rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if r.remaining() / 8 < n {
            return r.fail(format!("tensor {name} needs {n} values"));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos;
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("non-finite value in {name}"),
                });
            }
            data.push(v);
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}
