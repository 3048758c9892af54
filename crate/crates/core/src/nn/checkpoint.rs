//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"CDFMCKPT"`, version byte, `u32` block count, then per block:
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension, and the
//! values as raw `f64`. Blocks appear in registration order; running
//! statistics are included.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CDFMCKPT";
pub const VERSION: u8 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for b in store.blocks() {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in b.value.as_slice() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads values into a store with the same block names and shapes.
pub fn decode_into<T: Scalar>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<()> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!("{count} blocks in file, model has {}", store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("block name: {e}")))?
            .to_owned();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let block = store.block_mut(id);
        if block.name != name || block.shape != shape {
            return Err(Error::Checkpoint(format!(
                "block `{name}` {shape:?} does not match model block `{}` {:?}",
                block.name, block.shape
            )));
        }
        for v in block.value.as_mut_slice() {
            *v = T::lit(f64::from_le_bytes(c.take(8)?.try_into().unwrap()));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(())
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_into(&bytes, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{init_params, InitScheme, ParamKind};

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        s.register("conv.weight", &[27, 2, 3], ParamKind::Weight).unwrap();
        s.register("bn.running_var", &[3], ParamKind::RunningVar).unwrap();
        s
    }

    #[test]
    fn roundtrip_and_layout() {
        let mut a = store();
        init_params(&mut a, &InitScheme { seed: 4, ..Default::default() });
        let bytes = encode(&a);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes[8], VERSION);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        let first_value_at = 13 + 4 + "conv.weight".len() + 4 + 3 * 8;
        let v0 = f64::from_le_bytes(bytes[first_value_at..first_value_at + 8].try_into().unwrap());
        assert_eq!(v0, a.value(a.id("conv.weight").unwrap())[(0, 0)]);

        let mut b = store();
        decode_into(&bytes, &mut b).unwrap();
        for (x, y) in a.blocks().iter().zip(b.blocks()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let a = store();
        let bytes = encode(&a);
        let mut other = ParamStore::<f64>::new(0);
        other.register("conv.weight", &[27, 2, 4], ParamKind::Weight).unwrap();
        other.register("bn.running_var", &[3], ParamKind::RunningVar).unwrap();
        assert!(decode_into(&bytes, &mut other).is_err());
        let mut b = store();
        assert!(decode_into(&bytes[..bytes.len() - 1], &mut b).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_into(&bad, &mut b).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(decode_into(&bad, &mut b).is_err());
    }
}
