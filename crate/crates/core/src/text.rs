//! Text conditioning: canonical prompt strings, a pluggable frozen encoder
//! and the two trainable projection heads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, ParamStoreError, Real, Tensor};

/// Width of raw encoder outputs.
pub const RAW_DIM: usize = 512;
/// Default width of the projected conditioning vectors.
pub const EMBED_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("text is empty after canonicalization")]
    Empty,
    #[error("no precomputed embedding for `{0}`")]
    MissingKey(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    Dim { got: usize, expected: usize },
    #[error("projection input is the zero vector")]
    ZeroVector,
    #[error("malformed embedding file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Params(#[from] ParamStoreError),
}

pub type Result<T> = std::result::Result<T, TextError>;

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace().map(|t| t.to_lowercase()).collect::<Vec<_>>().join(" ")
}

/// Metadata and undersampling descriptions of one scan.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TextBundle {
    pub metadata: String,
    pub undersampling: String,
}

impl TextBundle {
    pub fn new(metadata: &str, undersampling: &str) -> Result<Self> {
        let metadata = canonicalize(metadata);
        let undersampling = canonicalize(undersampling);
        if metadata.is_empty() || undersampling.is_empty() {
            return Err(TextError::Empty);
        }
        Ok(TextBundle {
            metadata,
            undersampling,
        })
    }
}

/// Scan descriptors rendered into the metadata prompt.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScanMetadata {
    pub modality: String,
    pub view: Option<String>,
    pub field_strength_t: Option<f64>,
    pub vendor: Option<String>,
}

/// `modality {m}; view {v}; field {f}t; vendor {x}` with absent fields
/// rendered as `unknown`.
pub fn compose_metadata_text(meta: &ScanMetadata) -> String {
    let field = meta.field_strength_t.map(format_field).unwrap_or_else(|| "unknown".into());
    let text = format!(
        "modality {}; view {}; field {}; vendor {}",
        or_unknown(Some(&meta.modality)),
        or_unknown(meta.view.as_deref()),
        field,
        or_unknown(meta.vendor.as_deref()),
    );
    canonicalize(&text)
}

fn or_unknown(s: Option<&str>) -> String {
    match s.map(str::trim) {
        Some(v) if !v.is_empty() => v.to_string(),
        _ => "unknown".to_string(),
    }
}

/// `3.0t`, `1.5t`, `0.55t`: at least one decimal, trailing zeros trimmed.
fn format_field(t: f64) -> String {
    let s = format!("{t:.3}");
    let s = s.trim_end_matches('0');
    let s = if s.ends_with('.') { format!("{s}0") } else { s.to_string() };
    format!("{s}t")
}

/// Maps canonical text to a raw `RAW_DIM` embedding.
pub trait TextEncoder {
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Signed feature hashing of word unigrams, word bigrams and character
/// trigrams into `RAW_DIM` bins, scaled to unit norm.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEncoder;

fn fnv(kind: &str, s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(kind.as_bytes());
    h.write(&[0]);
    h.write(s.as_bytes());
    h.finish()
}

impl TextEncoder for HashingEncoder {
    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let canon = canonicalize(text);
        let tokens: Vec<&str> = canon
            .split(|c: char| c.is_whitespace() || c == ';' || c == ',' || c == ':')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            return Err(TextError::Empty);
        }
        let mut v = vec![0.0f64; RAW_DIM];
        let mut add = |h: u64, w: f64| {
            let bin = (h % RAW_DIM as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bin] += sign * w;
        };
        for t in &tokens {
            add(fnv("u", t), 1.0);
            let padded: Vec<char> = format!("<{t}>").chars().collect();
            for g in padded.windows(3) {
                add(fnv("c", &g.iter().collect::<String>()), 0.25);
            }
        }
        for pair in tokens.windows(2) {
            add(fnv("b", &format!("{} {}", pair[0], pair[1])), 0.5);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(TextError::ZeroVector);
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingManifest {
    format_version: u32,
    dim: usize,
    data_file: String,
    /// Canonical text → element offset into the data file.
    entries: BTreeMap<String, usize>,
}

/// Embeddings looked up by canonical text from a manifest plus a
/// little-endian `f32` array file.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    table: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedEncoder {
    pub fn from_table(table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for v in table.values() {
            if v.len() != RAW_DIM {
                return Err(TextError::Dim {
                    got: v.len(),
                    expected: RAW_DIM,
                });
            }
        }
        Ok(PrecomputedEncoder {
            table: table.into_iter().map(|(k, v)| (canonicalize(&k), v)).collect(),
        })
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TextError::Io { path, source }
        };
        let text = fs::read_to_string(manifest).map_err(io(manifest))?;
        let m: EmbeddingManifest = serde_json::from_str(&text).map_err(|e| TextError::Format {
            path: manifest.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.dim != RAW_DIM {
            return Err(TextError::Dim {
                got: m.dim,
                expected: RAW_DIM,
            });
        }
        let data_path = manifest.parent().unwrap_or(Path::new(".")).join(&m.data_file);
        let bytes = fs::read(&data_path).map_err(io(&data_path))?;
        let mut table = BTreeMap::new();
        for (key, off) in m.entries {
            let end = (off + m.dim) * 4;
            if end > bytes.len() {
                return Err(TextError::Format {
                    path: data_path,
                    detail: format!("entry `{key}` runs past the end of the data"),
                });
            }
            let v = bytes[off * 4..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            table.insert(key, v);
        }
        Self::from_table(table)
    }

    /// Writes `manifest` and a sibling `<stem>.f32` data file.
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let data_file = manifest.with_extension("f32");
        let mut bytes = Vec::new();
        let mut entries = BTreeMap::new();
        for (i, (k, v)) in self.table.iter().enumerate() {
            entries.insert(k.clone(), i * RAW_DIM);
            v.iter().for_each(|x| bytes.extend_from_slice(&(*x as f32).to_le_bytes()));
        }
        let m = EmbeddingManifest {
            format_version: 1,
            dim: RAW_DIM,
            data_file: data_file.file_name().expect("file name").to_string_lossy().into_owned(),
            entries,
        };
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TextError::Io { path, source }
        };
        fs::write(&data_file, bytes).map_err(io(&data_file))?;
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(manifest, json + "\n").map_err(io(manifest))
    }
}

impl TextEncoder for PrecomputedEncoder {
    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let key = canonicalize(text);
        if key.is_empty() {
            return Err(TextError::Empty);
        }
        self.table.get(&key).cloned().ok_or(TextError::MissingKey(key))
    }
}

/// Which projection head to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Metadata,
    Undersampling,
}

impl TextKind {
    pub fn name(self) -> &'static str {
        match self {
            TextKind::Metadata => "metadata",
            TextKind::Undersampling => "undersampling",
        }
    }
}

/// Linear + L2-normalization heads for both text kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextHeads {
    pub meta_w: ParamId,
    pub meta_b: ParamId,
    pub under_w: ParamId,
    pub under_b: ParamId,
    pub dim: usize,
}

impl TextHeads {
    /// Registers `text.{metadata,undersampling}.{w,b}` with uniform
    /// `±1/sqrt(RAW_DIM)` initialization.
    pub fn register<T: Real>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (RAW_DIM as f64).sqrt();
        let mut uni = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect() };
        let meta_w = store.register("text.metadata.w", &[dim, RAW_DIM], uni(dim * RAW_DIM))?;
        let meta_b = store.register("text.metadata.b", &[dim], uni(dim))?;
        let under_w = store.register("text.undersampling.w", &[dim, RAW_DIM], uni(dim * RAW_DIM))?;
        let under_b = store.register("text.undersampling.b", &[dim], uni(dim))?;
        Ok(TextHeads {
            meta_w,
            meta_b,
            under_w,
            under_b,
            dim,
        })
    }

    /// `normalize(W·raw + b)` as a `[1, dim]` tensor.
    pub fn project<T: Real>(&self, store: &ParamStore<T>, kind: TextKind, raw: &[f64]) -> Result<Tensor<T>> {
        if raw.len() != RAW_DIM {
            return Err(TextError::Dim {
                got: raw.len(),
                expected: RAW_DIM,
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(TextError::Format {
                path: PathBuf::new(),
                detail: "non-finite raw embedding".into(),
            });
        }
        let (w, b) = match kind {
            TextKind::Metadata => (self.meta_w, self.meta_b),
            TextKind::Undersampling => (self.under_w, self.under_b),
        };
        let x = Tensor::from_f64(raw, &[1, RAW_DIM])?;
        let y = x.linear(&store.leaf(w), Some(&store.leaf(b)))?;
        if y.data().iter().all(|v| *v == T::zero()) {
            return Err(TextError::ZeroVector);
        }
        Ok(y.l2_normalize_rows()?)
    }
}

/// Projected metadata and undersampling vectors shared by every phase.
#[derive(Debug, Clone)]
pub struct ConditioningVectors<T: Real> {
    pub t_m: Tensor<T>,
    pub t_u: Tensor<T>,
}

impl TextHeads {
    pub fn project_metadata<T: Real>(&self, store: &ParamStore<T>, raw: &[f64]) -> Result<Tensor<T>> {
        self.project(store, TextKind::Metadata, raw)
    }

    pub fn project_undersampling<T: Real>(&self, store: &ParamStore<T>, raw: &[f64]) -> Result<Tensor<T>> {
        self.project(store, TextKind::Undersampling, raw)
    }

    /// Encodes and projects both strings of a bundle.
    pub fn condition<T: Real>(
        &self,
        store: &ParamStore<T>,
        encoder: &dyn TextEncoder,
        bundle: &TextBundle,
    ) -> Result<ConditioningVectors<T>> {
        Ok(ConditioningVectors {
            t_m: self.project_metadata(store, &encoder.encode(&bundle.metadata)?)?,
            t_u: self.project_undersampling(store, &encoder.encode(&bundle.undersampling)?)?,
        })
    }
}

/// One row per unique `(kind, text)`: the projected unit vector.
pub fn embedding_table<T: Real>(
    texts: &BTreeSet<(TextKind, String)>,
    encoder: &dyn TextEncoder,
    heads: &TextHeads,
    store: &ParamStore<T>,
) -> Result<Vec<(TextKind, String, Vec<f64>)>> {
    crate::autodiff::no_grad(|| {
        texts
            .iter()
            .map(|(kind, text)| {
                let raw = encoder.encode(text)?;
                let t = heads.project(store, *kind, &raw)?;
                Ok((*kind, text.clone(), t.to_f64_vec()))
            })
            .collect()
    })
}

/// Writes an embedding table as CSV: `kind,text,e0,…`.
pub fn write_embedding_csv(rows: &[(TextKind, String, Vec<f64>)], out: impl std::io::Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = rows.first().map(|r| r.2.len()).unwrap_or(0);
    let mut header = vec!["kind".to_string(), "text".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (kind, text, v) in rows {
        let mut rec = vec![kind.name().to_string(), text.clone()];
        rec.extend(v.iter().map(|x| format!("{x:.9e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
