//! Modality-name embeddings.
//!
//! A modality name is mapped to a fixed-dimension vector either through a
//! table exported from an external text encoder or through a deterministic
//! hash-seeded draw, which makes every name (including ones never seen during
//! training) embeddable.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const DEFAULT_DIM: usize = 64;

/// Lowercase, trim, and strip a trailing file extension.
pub fn normalize_modality_name(raw: &str) -> Result<String> {
    let mut name = raw.trim().to_lowercase();
    if let Some(stem) = name.strip_suffix(".nii.gz") {
        name = stem.to_string();
    } else if let Some((stem, ext)) = name.rsplit_once('.') {
        if !stem.is_empty() && !ext.is_empty() && ext.chars().all(|c| c.is_ascii_alphanumeric()) && ext.chars().any(|c| c.is_ascii_alphabetic()) {
            name = stem.to_string();
        }
    }
    let name = name.trim().to_string();
    if name.is_empty() {
        return Err(Error::InvalidName(raw.to_string()));
    }
    Ok(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEmbedding {
    pub name: String,
    pub vector: Arc<[f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    HashSeeded,
    Table,
}

pub type EmbeddingTable = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
pub struct EmbeddingSource {
    pub mode: EmbeddingMode,
    pub table: Option<EmbeddingTable>,
    /// In table mode, embed missing names with the hash-seeded rule instead of failing.
    pub fallback: bool,
    pub dim: usize,
}

impl EmbeddingSource {
    pub fn hash_seeded(dim: usize) -> Self {
        Self {
            mode: EmbeddingMode::HashSeeded,
            table: None,
            fallback: false,
            dim,
        }
    }

    pub fn from_table(table: EmbeddingTable, dim: usize, fallback: bool) -> Result<Self> {
        if let Some((name, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "table entry '{name}' has dimension {} but {dim} was requested",
                v.len()
            )));
        }
        Ok(Self {
            mode: EmbeddingMode::Table,
            table: Some(table),
            fallback,
            dim,
        })
    }
}

/// Unit-norm standard-normal vector seeded by the stable hash of the name.
pub fn hash_seeded_vector(canonical: &str, dim: usize) -> Vec<f64> {
    let mut s = Stream::derived(rng::stable_hash(canonical), &[rng::tag::EMBED, dim as u64]);
    let mut v: Vec<f64> = (0..dim).map(|_| s.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Parse a JSON `{name: [numbers]}` table. All vectors must share one length.
pub fn parse_embedding_table(text: &str) -> Result<EmbeddingTable> {
    let raw: BTreeMap<String, Vec<f64>> =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("embedding table: {e}")))?;
    let mut table = EmbeddingTable::new();
    let mut dim = None;
    for (name, v) in raw {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::DimensionMismatch(format!(
                    "entry '{name}' has dimension {} but earlier entries have {d}",
                    v.len()
                )))
            }
            _ => {}
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("entry '{name}' contains non-finite values")));
        }
        table.insert(normalize_modality_name(&name)?, v);
    }
    Ok(table)
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_table(&text)
}

/// Embedding lookup with a shared per-name cache.
#[derive(Debug)]
pub struct ModalityEmbedder {
    source: EmbeddingSource,
    cache: RwLock<HashMap<String, Arc<[f64]>>>,
}

impl ModalityEmbedder {
    pub fn new(source: EmbeddingSource) -> Self {
        Self {
            source,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.source.dim
    }

    pub fn source(&self) -> &EmbeddingSource {
        &self.source
    }

    pub fn cached(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    pub fn embed(&self, name: &str) -> Result<ModalityEmbedding> {
        let canonical = normalize_modality_name(name)?;
        if let Some(v) = self.cache.read().ok().and_then(|c| c.get(&canonical).cloned()) {
            return Ok(ModalityEmbedding {
                name: canonical,
                vector: v,
            });
        }
        let vector: Arc<[f64]> = self.compute(&canonical)?.into();
        if let Ok(mut c) = self.cache.write() {
            c.entry(canonical.clone()).or_insert_with(|| vector.clone());
        }
        Ok(ModalityEmbedding {
            name: canonical,
            vector,
        })
    }

    /// Uncached computation.
    pub fn compute(&self, canonical: &str) -> Result<Vec<f64>> {
        match self.source.mode {
            EmbeddingMode::HashSeeded => Ok(hash_seeded_vector(canonical, self.source.dim)),
            EmbeddingMode::Table => {
                match self.source.table.as_ref().and_then(|t| t.get(canonical)) {
                    Some(v) => Ok(v.clone()),
                    None if self.source.fallback => Ok(hash_seeded_vector(canonical, self.source.dim)),
                    None => Err(Error::UnknownModality(canonical.to_string())),
                }
            }
        }
    }
}
