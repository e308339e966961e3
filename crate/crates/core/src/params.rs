//! Named parameter tensors and the binary checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic   "LRPN"
//! u32     format version
//! u32     byte length of the key-value block, then `key = value\n` lines
//! u32     tensor count
//! per tensor, in declaration order:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u64 per dimension
//!   f64 values, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LRPN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; stored in checkpoints, excluded from counts and updates.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Matrix,
    pub kind: ParamKind,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: FxHashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Matrix, kind: ParamKind) -> Result<usize> {
        let name = name.into();
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!("{name}: shape {shape:?} vs {} values", value.len())));
        }
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("parameter {name} declared twice")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            shape,
            value,
            kind,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index_of(name).map(|i| &mut self.entries[i])
    }

    pub fn entry(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(Param::numel)
            .sum()
    }

    /// Trainable scalars under names starting with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable && p.name.starts_with(prefix))
            .map(Param::numel)
            .sum()
    }

    /// Flatten all trainable values in declaration order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .flat_map(|p| p.value.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape("flat parameter vector has the wrong length".into()));
        }
        let mut off = 0;
        for p in self.entries.iter_mut().filter(|p| p.kind == ParamKind::Trainable) {
            let n = p.numel();
            p.value.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Serialize `meta` and every tensor of `store` (buffers included).
pub fn write_checkpoint(w: &mut impl Write, meta: &BTreeMap<String, String>, store: &ParamStore) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    let mut kv = String::new();
    for (k, v) in meta {
        kv.push_str(k);
        kv.push_str(" = ");
        kv.push_str(v);
        kv.push('\n');
    }
    write_u32(w, kv.len() as u32)?;
    w.write_all(kv.as_bytes())?;
    write_u32(w, store.len() as u32)?;
    for p in store.iter() {
        write_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        write_u32(w, p.shape.len() as u32)?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let kv_len = read_u32(r).map_err(io)? as usize;
    let mut kv = vec![0u8; kv_len];
    r.read_exact(&mut kv).map_err(io)?;
    let kv = String::from_utf8(kv).map_err(|_| bad("header is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in kv.lines() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| bad("malformed header line"))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let count = read_u32(r).map_err(io)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = read_u32(r).map_err(io)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(r).map_err(io)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r).map_err(io)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(r).map_err(io)?));
        }
        tensors.push((name, shape, data));
    }
    Ok(Checkpoint { meta, tensors })
}

impl ParamStore {
    /// Overwrite values from a checkpoint; every stored tensor must be present
    /// with the same shape and vice versa.
    pub fn load_tensors(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if tensors.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model declares {}",
                tensors.len(),
                self.len()
            )));
        }
        for (name, shape, data) in tensors {
            let p = self
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if &p.shape != shape {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?} vs {:?}", p.shape)));
            }
            p.value.as_mut_slice().copy_from_slice(data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.add("a.w", vec![2, 3], Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]).unwrap(), ParamKind::Trainable)
            .unwrap();
        s.add("a.bn.running_var", vec![3], Matrix::filled(1, 3, 1.0), ParamKind::Buffer).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("network.num_classes".to_string(), "4".to_string());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &meta, &s).unwrap();
        assert_eq!(&buf[..4], b"LRPN");
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(ck.meta, meta);
        let mut t = s.clone();
        t.entry_mut(0).value = Matrix::zeros(2, 3);
        t.load_tensors(&ck.tensors).unwrap();
        assert_eq!(t, s);
        assert_eq!(s.param_count(), 6);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(read_checkpoint(&mut &b"NOPE"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &BTreeMap::new(), &ParamStore::new()).unwrap();
        buf[4] = 9;
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
