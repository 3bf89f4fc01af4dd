//! Named trainable parameters, their gradients and AdamW state.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{numel, Gradients, Real, Tensor};

/// Version written into parameter manifests; readers reject other values.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum ParamStoreError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}`: expected {expected} values for shape {shape:?}, got {got}")]
    Shape {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("manifest version {found} is not supported (expected {MANIFEST_VERSION})")]
    Version { found: u32 },
    #[error("malformed parameter file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ParamStoreError + '_ {
    move |source| ParamStoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// AdamW hyper-parameters for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Parameters in registration order. Registration order is part of the
/// serialized format and of every derived random stream, so it must not
/// depend on hash-map iteration.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    adam_step: u64,
    has_optimizer_state: bool,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the binary file.
    offset: usize,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<ParamId, ParamStoreError> {
        if self.by_name.contains_key(name) {
            return Err(ParamStoreError::Duplicate(name.to_string()));
        }
        let n = numel(shape);
        if data.len() != n {
            return Err(ParamStoreError::Shape {
                name: name.to_string(),
                shape: shape.to_vec(),
                expected: n,
                got: data.len(),
            });
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// A fresh graph leaf holding the current value of `id`.
    pub fn leaf(&self, id: ParamId) -> Tensor<T> {
        let e = &self.entries[id.0];
        Tensor::param_leaf(e.data.clone(), e.shape.clone(), id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn adam_step(&self) -> u64 {
        self.step
    }

    /// Adds the parameter gradients of one backward pass to the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            if let Some(e) = self.entries.get_mut(id.0) {
                super::add_assign(&mut e.grad, g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Squared L2 norm of the stored gradient of `id`.
    pub fn grad_norm_sq(&self, id: ParamId) -> f64 {
        self.entries[id.0].grad.iter().map(|g| g.f64() * g.f64()).sum()
    }

    /// One bias-corrected AdamW update with decoupled weight decay using the
    /// stored gradients. Leaves every parameter untouched if any gradient is
    /// non-finite.
    pub fn adamw_step(&mut self, cfg: &AdamW) -> Result<(), ParamStoreError> {
        if let Some(e) = self.entries.iter().find(|e| e.grad.iter().any(|g| !g.is_finite())) {
            return Err(ParamStoreError::NonFiniteGradient(e.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::of(1.0 - cfg.beta1.powi(t));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t));
        let lr = T::of(cfg.lr);
        let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
        let eps = T::of(cfg.eps);
        let one = T::one();
        for e in &mut self.entries {
            for i in 0..e.data.len() {
                let g = e.grad[i];
                e.m[i] = b1 * e.m[i] + (one - b1) * g;
                e.v[i] = b2 * e.v[i] + (one - b2) * g * g;
                let mh = e.m[i] / bc1;
                let vh = e.v[i] / bc2;
                e.data[i] = e.data[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("json"), stem.with_extension("bin"))
    }

    /// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian
    /// values, followed by AdamW moments when `with_optimizer`).
    pub fn save(&self, stem: &Path, with_optimizer: bool) -> Result<(), ParamStoreError> {
        let (mpath, bpath) = Self::paths(stem);
        let mut bytes = Vec::new();
        let mut params = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            params.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset,
            });
            offset += e.data.len();
            e.data.iter().for_each(|v| v.write_le(&mut bytes));
        }
        if with_optimizer {
            for e in &self.entries {
                e.m.iter().for_each(|v| v.write_le(&mut bytes));
            }
            for e in &self.entries {
                e.v.iter().for_each(|v| v.write_le(&mut bytes));
            }
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            dtype: T::DTYPE.to_string(),
            adam_step: if with_optimizer { self.step } else { 0 },
            has_optimizer_state: with_optimizer,
            params,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&bpath, &bytes)?;
        write_atomic(&mpath, format!("{text}\n").as_bytes())
    }

    /// Loads values (and optimizer state when present) into an already
    /// registered store. Every stored name must exist with the same shape;
    /// values written in another precision are converted.
    pub fn load(&mut self, stem: &Path) -> Result<(), ParamStoreError> {
        let (mpath, bpath) = Self::paths(stem);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ParamStoreError::Format {
            path: mpath.clone(),
            detail: e.to_string(),
        })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(ParamStoreError::Version {
                found: manifest.format_version,
            });
        }
        let width = match manifest.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(ParamStoreError::Format {
                    path: mpath,
                    detail: format!("unknown dtype `{other}`"),
                })
            }
        };
        let bytes = fs::read(&bpath).map_err(io_err(&bpath))?;
        let total: usize = manifest.params.iter().map(|p| numel(&p.shape)).sum();
        let expected = total * width * if manifest.has_optimizer_state { 3 } else { 1 };
        if bytes.len() != expected {
            return Err(ParamStoreError::Format {
                path: bpath,
                detail: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let read = |elem: usize| -> T {
            let b = &bytes[elem * width..(elem + 1) * width];
            if width == 4 {
                T::of(f32::read_le(b) as f64)
            } else {
                T::of(f64::read_le(b))
            }
        };
        for p in &manifest.params {
            let id = self.id(&p.name).ok_or_else(|| ParamStoreError::Unknown(p.name.clone()))?;
            let e = &mut self.entries[id.0];
            if e.shape != p.shape {
                return Err(ParamStoreError::Shape {
                    name: p.name.clone(),
                    shape: e.shape.clone(),
                    expected: e.data.len(),
                    got: numel(&p.shape),
                });
            }
            for i in 0..e.data.len() {
                e.data[i] = read(p.offset + i);
                if manifest.has_optimizer_state {
                    e.m[i] = read(total + p.offset + i);
                    e.v[i] = read(2 * total + p.offset + i);
                }
            }
            if !manifest.has_optimizer_state {
                e.m.iter_mut().for_each(|v| *v = T::zero());
                e.v.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        self.step = manifest.adam_step;
        Ok(())
    }
}

/// Writes through a temporary sibling and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ParamStoreError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}
