//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic       8 bytes   "DEPFCKPT"
//! version     u32       format version (currently 1)
//! elem_bytes  u32       4 (f32 payload) or 8 (f64 payload)
//! meta_len    u64       length of the metadata blob
//! meta        meta_len  UTF-8 JSON object (configuration echo, vocabularies)
//! count       u32       number of tensors
//! count times:
//!   name_len  u32
//!   name      name_len  UTF-8 parameter name
//!   rank      u32
//!   dims      rank x u64
//!   data      product(dims) x elem_bytes, row-major little-endian floats
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEPFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint: metadata plus named parameters.
#[derive(Debug)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub params: ParamStore<T>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    meta: &serde_json::Value,
    params: &ParamStore<T>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    let meta = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            x.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

/// Reads a checkpoint of either element width, converting to `T`.
pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let width = cur.u32()? as usize;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported element width {width}")));
    }
    let meta_len = cur.u64()?;
    let meta = serde_json::from_slice(cur.take(meta_len)?)?;
    let count = cur.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks(width)
            .map(|c| {
                if width == 4 {
                    T::from_f64(f32::read_le(c) as f64)
                } else {
                    T::from_f64(f64::read_le(c))
                }
            })
            .collect();
        params
            .insert(name, Tensor::new(&shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { meta, params })
}
