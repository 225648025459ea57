//! Model checkpoints.
//!
//! Layout (little-endian): magic `CNVS1`, `u32` config length, config as
//! `key=value` lines, `u32` buffer count, then per buffer `u32` name length,
//! name, `u32` rank, `u32` dims, and `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 5] = b"CNVS1";

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.params.len() * 4 + 1024);
    out.extend_from_slice(MAGIC);
    let cfg = model.config.to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.entries.len() as u32).to_le_bytes());
    for e in &model.params.entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.id.slice(&model.params.data) {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Model<T>> {
    let bad = |msg: String| Error::format(path, msg);
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len()).map_err(bad)? != MAGIC {
        return Err(bad("not a CNVS1 checkpoint".into()));
    }
    let n = c.u32().map_err(bad)?;
    let text = std::str::from_utf8(c.take(n).map_err(bad)?).map_err(|e| bad(e.to_string()))?;
    let cfg = ModelConfig::from_kv(text)?;
    let mut model = Model::<T>::new(cfg)?;
    let count = c.u32().map_err(bad)?;
    let mut named: Vec<(String, Vec<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32().map_err(bad)?;
        let name = String::from_utf8(c.take(len).map_err(bad)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let rank = c.u32().map_err(bad)?;
        let mut size = 1usize;
        for _ in 0..rank {
            size = size.checked_mul(c.u32().map_err(bad)?).ok_or_else(|| bad("dimension overflow".into()))?;
        }
        let raw = c.take(size.checked_mul(4).ok_or_else(|| bad("size overflow".into()))?).map_err(bad)?;
        let values = raw.chunks_exact(4).map(|b| T::from_f32(f32::from_le_bytes(b.try_into().unwrap())).unwrap()).collect();
        named.push((name, values));
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    model.params.load_named(named.iter().map(|(n, v)| (n.as_str(), v.as_slice())))?;
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_for_f32() {
        let cfg = ModelConfig { base_channels: 4, encoder_stages: 2, extrinsics_out: 8, seed: 3, ..Default::default() };
        let m = Model::<f32>::new(cfg).unwrap();
        let back: Model<f32> = from_bytes(&to_bytes(&m), Path::new("mem")).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let cfg = ModelConfig { base_channels: 4, encoder_stages: 1, extrinsics_out: 4, ..Default::default() };
        let bytes = to_bytes(&Model::<f32>::new(cfg).unwrap());
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 3], Path::new("x")), Err(Error::Format { .. })));
        assert!(matches!(from_bytes::<f32>(b"NOPE!", Path::new("x")), Err(Error::Format { .. })));
    }
}
