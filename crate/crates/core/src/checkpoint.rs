//! Parameter checkpoints, little-endian:
//!
//! ```text
//! magic "RVPM" | format u32 | tensors u32
//! per tensor: name_len u16 | name utf-8 | rank u32 | dims u32 x rank | f64 x numel
//! ```
//!
//! Loading writes into an existing store built from the same configuration;
//! names and shapes must match slot by slot.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PARAMS_MAGIC: &[u8; 4] = b"RVPM";
pub const PARAMS_FORMAT: u32 = 1;

pub fn encode_params<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8);
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_FORMAT.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument("parameter name too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        let t = store.get(id);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Overwrites every tensor of `store` from `bytes`.
pub fn decode_params_into<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let mut r = Cursor { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != PARAMS_MAGIC {
        return Err(Error::BadMagic);
    }
    let format = r.u32("format")?;
    if format != PARAMS_FORMAT {
        return Err(Error::UnsupportedFormat(format));
    }
    let count = r.u32("tensor count")? as usize;
    if count != store.len() {
        return Err(Error::DimensionMismatch {
            what: "parameter tensor count",
            expected: store.len(),
            found: count,
        });
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::InvalidArgument(format!("parameter name is not utf-8: {e}")))?;
        if name != store.name(id) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {name:?} where the model expects {:?}",
                store.name(id)
            )));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != store.get(id).shape() {
            return Err(Error::InvalidArgument(format!(
                "{name}: checkpoint shape {shape:?}, model shape {:?}",
                store.get(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, "tensor data")?;
        for (dst, chunk) in store.get_mut(id).data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = T::lit(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(())
}

pub fn save_params<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_params(store)?)?;
    Ok(())
}

pub fn load_params_into<T: Scalar>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    decode_params_into(store, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_img: 4,
            vocab: 31,
            c: 2,
            base_layers: 1,
            fusion_layers: 1,
            decoder_layers: 1,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let a = Model::<f64>::new(small());
        let mut b = Model::<f64>::new(ModelConfig { seed: 9, ..small() });
        assert_ne!(a.params.get(a.encoders.token_embedding).data(), b.params.get(b.encoders.token_embedding).data());
        decode_params_into(&mut b.params, &encode_params(&a.params).unwrap()).unwrap();
        for id in a.params.ids() {
            assert_eq!(a.params.get(id).data(), b.params.get(id).data());
        }
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let a = Model::<f64>::new(small());
        let mut b = Model::<f64>::new(ModelConfig { d: 12, ..small() });
        assert!(decode_params_into(&mut b.params, &encode_params(&a.params).unwrap()).is_err());
        let mut bytes = encode_params(&a.params).unwrap();
        bytes.truncate(bytes.len() - 3);
        let mut c = Model::<f64>::new(small());
        assert!(matches!(decode_params_into(&mut c.params, &bytes), Err(Error::Truncated(_))));
        assert!(matches!(decode_params_into(&mut c.params, b"XXXX"), Err(Error::BadMagic)));
    }
}
