//! Versioned little-endian parameter file.
//!
//! ```text
//! magic      8 bytes  "SQSKCKPT"
//! version    u32
//! payload:
//!   n_meta   u32, then n_meta x (key: str, value: str)
//!   n_param  u32, then n_param x (name: str, ndim: u32, dims: ndim x u64, values: f32 x prod(dims))
//! checksum   u64      FNV-1a over the payload bytes
//! ```
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"SQSKCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<CheckpointParam>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ParamStore<T>, meta: BTreeMap<String, String>) -> Self {
        Checkpoint {
            meta,
            params: params
                .iter()
                .map(|(_, name, t)| CheckpointParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    /// Copies values into `params`; names and shapes must match exactly.
    pub fn load_into<T: Real>(&self, params: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (id, saved) in ids.into_iter().zip(&self.params) {
            if params.name(id) != saved.name || params.get(id).shape() != saved.shape.as_slice() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {} {:?} does not match saved {} {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    saved.name,
                    saved.shape
                )));
            }
            let dst = params.get_mut(id).data_mut();
            for (d, &s) in dst.iter_mut().zip(&saved.values) {
                *d = T::from_f64_lossy(s as f64);
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut payload, k);
            put_str(&mut payload, v);
        }
        payload.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut payload, &p.name);
            payload.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                payload.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| TensorError::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported format version {version}")));
        }
        let payload = &bytes[12..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a64(payload) != stored {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut params = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("parameter too large"))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(CheckpointParam { name, shape, values });
        }
        if r.pos != payload.len() {
            return Err(bad("trailing bytes in payload"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TensorError::Checkpoint("truncated payload".into()))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TensorError::Checkpoint("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap()).unwrap();
        s.add("a.b", Tensor::new(vec![2], vec![f32::MIN_POSITIVE, 7.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let mut meta = BTreeMap::new();
        meta.insert("model".to_string(), "{\"kind\":\"x\"}".to_string());
        let ck = Checkpoint::from_params(&sample(), meta);
        let bytes = ck.encode();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut fresh = sample();
        fresh.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        back.load_into(&mut fresh).unwrap();
        assert_eq!(fresh.iter().map(|p| p.2.data().to_vec()).collect::<Vec<_>>(), sample().iter().map(|p| p.2.data().to_vec()).collect::<Vec<_>>());
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = Checkpoint::from_params(&sample(), BTreeMap::new()).encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(Checkpoint::decode(&bytes).is_err());
        assert!(Checkpoint::decode(b"garbage").is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let ck = Checkpoint::from_params(&sample(), BTreeMap::new());
        let mut other = ParamStore::<f32>::new();
        other.add("a.w", Tensor::zeros(vec![4])).unwrap();
        other.add("a.b", Tensor::zeros(vec![2])).unwrap();
        assert!(ck.load_into(&mut other).is_err());
    }
}
