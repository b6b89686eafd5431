//! Named parameter storage, graph binding, init and checkpoint IO.
//!
//! Parameters live in a [`ParamStore`]: an insertion-ordered map from dotted
//! names (`encoder.blocks.3.attn.wq.weight`) to tensors. The dotted scheme is
//! load-bearing — fine-tuning strategies select trainable subsets by name
//! pattern, and the analysis code groups parameters by prefix.

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

const CHECKPOINT_MAGIC: &str = "covft-checkpoint v1";

#[derive(Default, Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        {
            return Err(Error::Input(format!("bad parameter name {name:?}")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} inserted twice")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn n_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    // ---- checkpoints -----------------------------------------------------
    //
    // One file, insertion order preserved: a magic line, then per tensor a
    // header line `name dim0 dim1 ...` followed by the raw little-endian f64
    // payload. Plain enough to inspect with xxd, exact enough to digest.

    fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        buf.push(b'\n');
        for (name, t) in &self.entries {
            buf.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                buf.extend_from_slice(format!(" {d}").as_bytes());
            }
            buf.push(b'\n');
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.serialize()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0;
        let read_line = |pos: &mut usize| -> Result<String> {
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            if *pos >= bytes.len() {
                return Err(Error::parse(path, "truncated header line"));
            }
            let line = std::str::from_utf8(&bytes[start..*pos])
                .map_err(|_| Error::parse(path, "non-utf8 header"))?
                .to_string();
            *pos += 1;
            Ok(line)
        };
        if read_line(&mut pos)? != CHECKPOINT_MAGIC {
            return Err(Error::parse(path, "not a checkpoint file"));
        }
        let mut store = ParamStore::new();
        while pos < bytes.len() {
            let header = read_line(&mut pos)?;
            let mut parts = header.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| Error::parse(path, "empty tensor header"))?;
            let shape: Vec<usize> = parts
                .map(|p| {
                    p.parse()
                        .map_err(|_| Error::parse(path, format!("bad dim {p:?} for {name}")))
                })
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            if pos + n * 8 > bytes.len() {
                return Err(Error::parse(path, format!("truncated payload for {name}")));
            }
            let data: Vec<f64> = bytes[pos..pos + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += n * 8;
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    /// SHA-256 of the serialized checkpoint bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.serialize());
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- graph binding ---------------------------------------------------------

/// Binds store parameters into a [`Graph`] as leaves, once each, so that every
/// use of a parameter shares one node and its gradient accumulates there.
/// An optional mask marks which parameters are trainable; the rest become
/// constant leaves, which lets the backward sweep skip frozen subtrees.
pub struct Tape<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    mask: Option<&'s BTreeSet<String>>,
    bound: IndexMap<String, Var>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            graph: Graph::new(),
            store,
            mask: None,
            bound: IndexMap::new(),
        }
    }

    pub fn with_mask(store: &'s ParamStore, mask: &'s BTreeSet<String>) -> Self {
        Tape {
            graph: Graph::new(),
            store,
            mask: Some(mask),
            bound: IndexMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let trainable = self.mask.is_none_or(|m| m.contains(name));
        let v = self.graph.leaf(t, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn bound(&self) -> &IndexMap<String, Var> {
        &self.bound
    }

    /// Gradients of all trainable bound parameters, by name. A trainable
    /// parameter that never influenced the loss gets an explicit zero vector.
    pub fn grads_by_name(&self, grads: &Grads) -> IndexMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter(|(_, v)| self.graph.needs_grad(**v))
            .map(|(n, v)| {
                let g = grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.graph.value(*v).len()]);
                (n.clone(), g)
            })
            .collect()
    }
}

// ---- init ------------------------------------------------------------------

/// Standard normal draws via Box-Muller (kept in-crate so initialization is
/// identical everywhere and needs nothing beyond a uniform source).
pub fn randn_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        out.push(r * c * std);
        out.push(r * s * std);
    }
    out.truncate(n);
    out
}

pub fn normal(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, randn_vec(rng, n, std)).expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = stream(11, "ckpt");
        s.insert("a.weight", normal(&mut rng, vec![3, 4], 0.5)).unwrap();
        s.insert("a.bias", Tensor::row(vec![0.0, 1.5, -2.25, 3.125])).unwrap();
        s.insert("b.weight", normal(&mut rng, vec![2, 2], 1.0)).unwrap();
        s
    }

    #[test]
    fn insert_rejects_duplicates_and_bad_names() {
        let mut s = ParamStore::new();
        s.insert("ok.name", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("ok.name", Tensor::scalar(2.0)).is_err());
        assert!(s.insert("has space", Tensor::scalar(1.0)).is_err());
        assert!(s.insert("", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_and_order_preserving() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        let names: Vec<_> = store.names().collect();
        let loaded_names: Vec<_> = loaded.names().collect();
        assert_eq!(names, loaded_names);
        for (name, t) in store.iter() {
            let lt = loaded.get(name).unwrap();
            assert_eq!(t.shape(), lt.shape());
            assert_eq!(t.data(), lt.data()); // bit-exact
        }
        assert_eq!(store.digest(), loaded.digest());
    }

    #[test]
    fn digest_changes_with_any_value() {
        let store = sample_store();
        let d0 = store.digest();
        let mut other = sample_store();
        other.get_mut("a.bias").unwrap().data_mut()[2] += 1e-15;
        assert_ne!(d0, other.digest());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint\n").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }

    #[test]
    fn tape_masks_out_frozen_params() {
        let store = sample_store();
        let mask: BTreeSet<String> = ["a.weight".to_string()].into();
        let mut tape = Tape::with_mask(&store, &mask);
        let w = tape.param("a.weight").unwrap();
        let b = tape.param("b.weight").unwrap();
        let sw = tape.graph.sum(w).unwrap();
        let sb = tape.graph.sum(b).unwrap();
        let loss = tape.graph.add(sw, sb).unwrap();
        let grads = tape.graph.backward(loss).unwrap();
        assert!(grads.get(w).is_some());
        assert!(grads.get(b).is_none());
        let by_name = tape.grads_by_name(&grads);
        assert!(by_name.contains_key("a.weight"));
        assert!(!by_name.contains_key("b.weight"));
    }

    #[test]
    fn tape_binds_each_param_once() {
        let store = sample_store();
        let mut tape = Tape::new(&store);
        let v1 = tape.param("a.weight").unwrap();
        let v2 = tape.param("a.weight").unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn randn_moments_are_sane() {
        let mut rng = stream(1, "randn");
        let v = randn_vec(&mut rng, 20_000, 2.0);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 4.0).abs() < 0.15, "var {var}");
    }
}
