//! Named parameter storage, initialisation and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"FPCKPT\0\x01"
//! meta_len   u32       length of the JSON metadata blob
//! meta       meta_len  UTF-8 JSON (model configuration, free-form)
//! count      u32       number of tensors
//! repeated `count` times, ordered by path:
//!   name_len u32, name (UTF-8 path such as "backbone.stage0.block1.attn.qkv.weight")
//!   ndim     u32, then ndim × u64 extents
//!   values   product(extents) × f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FPCKPT\0\x01";

/// Parameters keyed by dotted path, iterated in sorted order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(path.into(), tensor);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::State(format!("missing parameter `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.tensors.values().for_each(Tensor::zero_grad);
    }

    /// Replaces a parameter's values, keeping it a gradient-collecting leaf.
    pub fn set(&mut self, path: &str, data: Vec<f64>) -> Result<()> {
        let shape = self.get(path)?.shape().to_vec();
        self.tensors.insert(path.to_string(), Tensor::param(&shape, data)?);
        Ok(())
    }

    /// A copy whose tensors are constants, for inference without graph
    /// bookkeeping.
    pub fn detached(&self) -> ParamStore {
        ParamStore { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.detach())).collect() }
    }

    /// Bit-exact equality of paths, shapes and values.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn write_checkpoint(&self, path: &Path, meta: &str) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 8 * self.num_values());
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, meta.len());
        buf.extend_from_slice(meta.as_bytes());
        put_u32(&mut buf, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len());
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.ndim());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, returning its metadata blob and parameters.
    pub fn read_checkpoint(path: &Path) -> Result<(String, ParamStore)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |what: &str| Error::Data(format!("{}: corrupt checkpoint ({what})", path.display()));
        let mut r = Reader { bytes: &bytes, pos: 0 };

        if r.take(8).ok_or_else(|| corrupt("short header"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let meta_len = r.u32().ok_or_else(|| corrupt("metadata length"))?;
        let meta = r.take(meta_len).ok_or_else(|| corrupt("metadata"))?;
        let meta = String::from_utf8(meta.to_vec()).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let count = r.u32().ok_or_else(|| corrupt("tensor count"))?;

        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| corrupt("name length"))?;
            let name = r.take(name_len).ok_or_else(|| corrupt("name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
            let ndim = r.u32().ok_or_else(|| corrupt("rank"))?;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("extents"))?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8).ok_or_else(|| corrupt("values"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(name, Tensor::param(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok((meta, store))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Normal(0, std²) samples redrawn until they fall within two standard
/// deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Collects parameters under a path prefix while a model is being built.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = join(&saved, name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let data = trunc_normal(self.rng, shape.iter().product(), std);
        self.put(name, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.put(name, shape, vec![0.0; shape.iter().product()])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.put(name, shape, vec![1.0; shape.iter().product()])
    }

    pub fn put(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        self.store.insert(join(&self.prefix, name), Tensor::param(shape, data)?);
        Ok(())
    }
}

/// Read-only view of the parameters below a path prefix.
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a ParamStore, prefix: &str) -> Self {
        Scope { store, prefix: prefix.to_string() }
    }

    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope { store: self.store, prefix: join(&self.prefix, name) }
    }

    pub fn get(&self, name: &str) -> Result<&'a Tensor> {
        self.store.get(&join(&self.prefix, name))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        b.scoped("layer", |b| {
            b.trunc_normal("weight", &[3, 2, 1, 1], 0.02)?;
            b.zeros("bias", &[3])
        })
        .unwrap();
        b.ones("gamma", &[4]).unwrap();
        store
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = sample_store();
        store.write_checkpoint(&path, "{\"k\":1}").unwrap();
        let (meta, back) = ParamStore::read_checkpoint(&path).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert!(store.bitwise_eq(&back));
        assert!(back.get("layer.weight").unwrap().requires_grad());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample_store().write_checkpoint(&path, "").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ParamStore::read_checkpoint(&path), Err(Error::Data(_))));
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(trunc_normal(&mut rng, 10_000, 0.02).iter().all(|v| v.abs() <= 0.04));
    }
}
