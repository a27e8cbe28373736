//! Binary checkpoint format.
//!
//! ```text
//! "DSCXv1"
//! repeated until EOF:
//!   u32 LE   name length
//!   bytes    UTF-8 name
//!   u32 LE   rank
//!   u64 LE   extent, `rank` times
//!   f64 LE   values, product(extents) times
//! ```

use std::path::Path;

use super::param::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"DSCXv1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CheckpointMismatch("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Loads values into `store`. Every entry must match the store's names and
/// shapes, in order, with nothing missing or left over.
pub fn decode_into(bytes: &[u8], store: &mut ParamStore) -> Result<()> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointMismatch("bad magic bytes".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let ids: Vec<_> = store.ids().collect();
    let mut staged = Vec::with_capacity(ids.len());
    for &id in &ids {
        if r.done() {
            return Err(Error::CheckpointMismatch(format!(
                "missing parameter {}",
                store.get(id).name
            )));
        }
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CheckpointMismatch("parameter name is not UTF-8".into()))?;
        let expected = store.get(id);
        if name != expected.name {
            return Err(Error::CheckpointMismatch(format!(
                "found parameter {name}, expected {}",
                expected.name
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != expected.value.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: shape {shape:?}, expected {:?}",
                expected.value.shape()
            )));
        }
        let n = expected.value.len();
        let raw = r.take(n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        staged.push(values);
    }
    if !r.done() {
        return Err(Error::CheckpointMismatch(
            "checkpoint has extra parameters".into(),
        ));
    }
    for (id, values) in ids.into_iter().zip(staged) {
        store.get_mut(id).value.data_mut().copy_from_slice(&values);
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_into(&bytes, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store(scale: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 3], (0..6).map(|i| i as f64 * scale).collect()).unwrap());
        s.add("a.b", Tensor::row(&[scale, -scale]));
        s
    }

    #[test]
    fn roundtrip() {
        let src = store(0.25);
        let bytes = encode(&src);
        assert_eq!(&bytes[..6], b"DSCXv1");
        let mut dst = store(0.0);
        decode_into(&bytes, &mut dst).unwrap();
        for ((_, a), (_, b)) in src.iter().zip(dst.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_mismatch() {
        let bytes = encode(&store(1.0));
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[3, 2]));
        other.add("a.b", Tensor::zeros(&[1, 2]));
        assert!(matches!(decode_into(&bytes, &mut other), Err(Error::CheckpointMismatch(_))));

        let mut renamed = ParamStore::new();
        renamed.add("x.w", Tensor::zeros(&[2, 3]));
        renamed.add("a.b", Tensor::zeros(&[1, 2]));
        assert!(decode_into(&bytes, &mut renamed).is_err());

        let mut shorter = ParamStore::new();
        shorter.add("a.w", Tensor::zeros(&[2, 3]));
        assert!(decode_into(&bytes, &mut shorter).is_err());

        assert!(decode_into(b"NOPE", &mut store(0.0)).is_err());
        assert!(decode_into(&bytes[..bytes.len() - 3], &mut store(0.0)).is_err());
    }
}
