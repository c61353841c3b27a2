//! Binary checkpoint format.
//!
//! ```text
//! "DGAE" | version: u32 LE
//! repeated until EOF:
//!   name_len: u64 | name: UTF-8 | rank: u64 | dims: rank x u64 | payload: f32 LE
//! ```
//!
//! All integers are little-endian. Optimizer state is stored as ordinary
//! records under the reserved `adam/` prefix; other auxiliary records (the
//! noise schedule, step counters) use `meta/` and `schedule/`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::params::{AdamSlot, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DGAE";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam/m/";
const ADAM_V: &str = "adam/v/";
const ADAM_T: &str = "adam/t/";

/// Ordered collection of named f32 tensors; the in-memory image of a file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds parameters and their optimizer state.
    pub fn add_store(&mut self, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.insert(name.to_string(), t.clone());
        }
        for (name, slot) in &store.adam {
            self.tensors.insert(format!("{ADAM_M}{name}"), slot.m.clone());
            self.tensors.insert(format!("{ADAM_V}{name}"), slot.v.clone());
            self.tensors.insert(format!("{ADAM_T}{name}"), Tensor::scalar(slot.step as f32));
        }
    }

    /// Parameters (and optimizer state) whose names start with `prefix`.
    pub fn store(&self, prefix: &str) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if name.starts_with(prefix) && !is_reserved(name) {
                store.insert(name.clone(), t.clone())?;
            }
        }
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let m = self.tensors.get(&format!("{ADAM_M}{name}"));
            let v = self.tensors.get(&format!("{ADAM_V}{name}"));
            let t = self.tensors.get(&format!("{ADAM_T}{name}"));
            if let (Some(m), Some(v), Some(t)) = (m, v, t) {
                store.set_adam_slot(&name, AdamSlot { m: m.clone(), v: v.clone(), step: t.item() as u64 })?;
            }
        }
        Ok(store)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take::<4>(&mut r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut tensors = BTreeMap::new();
        while !r.is_empty() {
            let len = read_u64(&mut r)? as usize;
            let name = String::from_utf8(take_vec(&mut r, len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = read_u64(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = take_vec(&mut r, numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name, Tensor::new(&dims, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn is_reserved(name: &str) -> bool {
    name.starts_with("adam/") || name.starts_with("meta/") || name.starts_with("schedule/")
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated record".into()))?;
    Ok(buf)
}

fn take_vec(r: &mut &[u8], n: usize) -> Result<Vec<u8>> {
    if r.len() < n {
        return Err(Error::Format("truncated record".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head.to_vec())
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take::<8>(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam::{adam_step, AdamConfig};

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("enc/w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5)).unwrap();
        s.insert("enc/b", Tensor::from_fn(&[3], |i| -(i as f32))).unwrap();
        s
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let mut ck = Checkpoint::new();
        ck.insert("a", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let b = ck.to_bytes();
        let mut want = b"DGAE".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(b"a");
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn store_with_optimizer_state_round_trips_bytes() {
        let mut s = sample_store();
        let grads = s.iter().map(|(k, t)| (k.to_string(), t.map(|v| v + 1.0))).collect();
        adam_step(&mut s, &grads, AdamConfig::with_lr(0.01)).unwrap();
        let mut ck = Checkpoint::new();
        ck.add_store(&s);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.store("enc/").unwrap(), s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0").is_err());
        let mut bytes = {
            let mut ck = Checkpoint::new();
            ck.add_store(&sample_store());
            ck.to_bytes()
        };
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
