use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NILMPRM\0";
const FORMAT_VERSION: u32 = 1;

/// Named parameter tensors, iterated in sorted name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Copies every entry of `other` into `self`, shapes must agree where names collide.
    pub fn overwrite_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in other.iter() {
            if let Some(existing) = self.entries.get(name) {
                if existing.shape() != value.shape() {
                    return Err(Error::shape("overwrite_from", existing.shape(), value.shape()));
                }
            }
            self.entries.insert(name.to_string(), value.clone());
        }
        Ok(())
    }

    /// Fails unless both stores have identical names and shapes.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b {
                return Err(Error::invalid(format!("parameter name mismatch: `{a}` vs `{b}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape("param layout", ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.iter()
            .filter_map(|(k, v)| other.get(k).map(|o| v.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.rng_seed.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
            Ok(buf)
        }
        if &take::<8>(&mut r)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let rng_seed = u64::from_le_bytes(take(&mut r)?);
        let count = u64::from_le_bytes(take(&mut r)?);
        let mut store = ParamStore::new(rng_seed);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let ndim = u32::from_le_bytes(take(&mut r)?) as usize;
            let shape = (0..ndim)
                .map(|_| take::<8>(&mut r).map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| take::<8>(&mut r).map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if store.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

/// Uniform Glorot-style initialisation in `[-limit, limit]`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from caller")
}
