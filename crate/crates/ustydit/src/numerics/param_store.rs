use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{Precision, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"USTY";
const VERSION: u32 = 1;

/// Named parameter tensors with a stable flat index over all scalars.
///
/// Iteration order is insertion order, which model construction keeps
/// deterministic, so the flat index is stable across runs for a given
/// model config.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].1 = tensor;
        } else {
            self.index.insert(name.to_string(), self.entries.len());
            self.entries.push((name.to_string(), tensor));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Resolve a flat scalar index to (name, offset-within-tensor).
    pub fn locate(&self, flat: usize) -> Option<(&str, usize)> {
        let mut rem = flat;
        for (name, t) in &self.entries {
            if rem < t.len() {
                return Some((name.as_str(), rem));
            }
            rem -= t.len();
        }
        None
    }

    pub fn get_flat(&self, flat: usize) -> Option<f64> {
        let (name, off) = self.locate(flat)?;
        Some(self.get(name)?.data[off])
    }

    pub fn set_flat(&mut self, flat: usize, value: f64) {
        if let Some((name, off)) = self.locate(flat).map(|(n, o)| (n.to_string(), o)) {
            self.get_mut(&name).unwrap().data[off] = value;
        }
    }

    /// Round every scalar through f32. Training keeps stores in this state
    /// so checkpoints round-trip bit-exactly.
    pub fn quantize(&mut self, precision: Precision) {
        for (_, t) in self.entries.iter_mut() {
            for v in t.data.iter_mut() {
                *v = precision.quantize(*v);
            }
        }
    }

    /// Flat binary checkpoint: magic "USTY", version u32, count u32, then
    /// per parameter: name length u32 + UTF-8 name, rank u32, dims u32s,
    /// values as little-endian f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Serialization("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        }
        fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
            let s = take(bytes, pos, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        }
        let bytes = bytes.as_slice();
        let mut pos = 0usize;
        if take(bytes, &mut pos, 4)? != MAGIC {
            return Err(Error::Serialization("bad magic".into()));
        }
        let version = read_u32(bytes, &mut pos)?;
        if version != VERSION {
            return Err(Error::Serialization(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(bytes, &mut pos)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(bytes, &mut pos)? as usize;
            let name = String::from_utf8(take(bytes, &mut pos, name_len)?.to_vec())
                .map_err(|e| Error::Serialization(e.to_string()))?;
            let rank = read_u32(bytes, &mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(bytes, &mut pos)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let s = take(bytes, &mut pos, 4)?;
                data.push(f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64);
            }
            store.insert(&name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap());
        s.insert("a.b", Tensor::new(vec![3], vec![0.5, -0.5, 1.5]).unwrap());
        s
    }

    #[test]
    fn name_and_flat_index_agree() {
        let s = sample_store();
        assert_eq!(s.num_scalars(), 9);
        assert_eq!(s.locate(0), Some(("a.w", 0)));
        assert_eq!(s.locate(6), Some(("a.b", 0)));
        assert_eq!(s.get_flat(7), Some(-0.5));
        assert_eq!(s.locate(9), None);
    }

    #[test]
    fn set_flat_updates_named_tensor() {
        let mut s = sample_store();
        s.set_flat(8, 9.0);
        assert_eq!(s.get("a.b").unwrap().data[2], 9.0);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut s = sample_store();
        s.quantize(Precision::F32);
        s.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.names(), s.names());
        for (name, t) in s.iter() {
            assert_eq!(&loaded.get(name).unwrap().data, &t.data);
            assert_eq!(&loaded.get(name).unwrap().shape, &t.shape);
        }
        // the file itself round-trips byte for byte
        let path2 = dir.path().join("ckpt2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }
}
