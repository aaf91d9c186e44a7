use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of network parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Adds `N(0, scale²)` noise to every parameter.
    pub fn perturb(&mut self, scale: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        for (_, t) in &mut self.entries {
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        ParamVars {
            vars,
            index: self.index.clone(),
        }
    }

    /// Writes `<path>` (little-endian f64 payload) and `<path>.json` (manifest).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * self.num_scalars());
        let mut params = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            params.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: bytes.len(),
            });
            t.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        let manifest = Manifest {
            dtype: MANIFEST_DTYPE.into(),
            params,
        };
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
        if manifest.dtype != MANIFEST_DTYPE {
            return Err(Error::UnsupportedDtype(manifest.dtype));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected: usize = manifest
            .params
            .iter()
            .map(|p| 8 * p.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != expected {
            return Err(Error::PayloadLengthMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let mut store = Self::new();
        for p in manifest.params {
            let n: usize = p.shape.iter().product();
            let Some(chunk) = bytes.get(p.offset..p.offset + 8 * n) else {
                return Err(Error::InvalidHeader {
                    field: "offset",
                    reason: format!("parameter {} lies outside the payload", p.name),
                });
            };
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(p.name, Tensor::new(p.shape, data)?);
        }
        Ok(store)
    }
}

const MANIFEST_DTYPE: &str = "f64-le";

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    params: Vec<ManifestEntry>,
}

/// `offset` is a byte offset into the payload.
#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Tape handles of a registered [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Flattened gradient in the store's parameter order.
    pub fn flat_gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        self.vars
            .iter()
            .flat_map(|&v| grads.get_or_zeros(v, tape.value(v).len()))
            .collect()
    }
}

/// He-normal initialization for a weight with the given fan-in.
pub(crate) fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
    let n = shape.iter().product();
    Tensor::from_raw(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.insert("a.w", he_normal(vec![2, 3], 3, &mut rng));
        s.insert("a.b", Tensor::zeros(vec![2]));
        s.insert("c", he_normal(vec![1, 1, 3, 3, 3], 27, &mut rng));
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let s = store();
        s.save(&path).unwrap();
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, 8 * s.num_scalars());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        store().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::PayloadLengthMismatch { .. })));
    }

    #[test]
    fn flat_round_trip() {
        let mut s = store();
        let mut flat = s.flatten();
        flat[0] = 42.0;
        s.load_flat(&flat).unwrap();
        assert_eq!(s.get("a.w").unwrap().data()[0], 42.0);
        assert!(s.load_flat(&flat[1..]).is_err());
    }
}
