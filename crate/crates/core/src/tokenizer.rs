//! Patch extraction and padding-aware mask planning.
//!
//! All modalities of a session form one token sequence: patches are indexed
//! `modality * grid_len + row_major_grid_index`. Voxels outside a modality's
//! valid extent are zeroed in the patch vectors, so padding never reaches the
//! network or the loss.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{ModalityEmbedder, ModalityEmbedding};
use crate::preprocess::PreparedSession;
use crate::rng::{self, Stream};
use crate::volume::{offset, Dims, Extent};

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub modality: usize,
    pub coords: [usize; 3],
    /// Flattened `p0 * p1 * p2` voxels in C order, zero outside the valid extent.
    pub voxels: Vec<f64>,
    /// Per-voxel membership in the valid extent (same layout as `voxels`).
    pub in_extent: Vec<bool>,
    pub in_extent_count: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub modalities: Vec<String>,
    pub grid: Dims,
    pub patch: Dims,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn grid_len(&self) -> usize {
        self.grid[0] * self.grid[1] * self.grid[2]
    }

    pub fn patch_len(&self) -> usize {
        self.patch[0] * self.patch[1] * self.patch[2]
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.patches.iter().enumerate().filter(|(_, p)| p.valid).map(|(i, _)| i).collect()
    }

    pub fn modality_range(&self, m: usize) -> std::ops::Range<usize> {
        m * self.grid_len()..(m + 1) * self.grid_len()
    }
}

/// Row-major flat index of a grid coordinate.
pub fn grid_index(grid: Dims, c: [usize; 3]) -> usize {
    (c[0] * grid[1] + c[1]) * grid[2] + c[2]
}

pub fn grid_coords(grid: Dims, i: usize) -> [usize; 3] {
    [i / (grid[1] * grid[2]), (i / grid[2]) % grid[1], i % grid[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub patch_size: Dims,
    /// Fraction of valid patches hidden.
    pub mask_ratio: f64,
    /// Probability of hiding one whole modality (imputation).
    pub p_drop: f64,
    /// A patch is valid when its in-extent nonzero fraction is at least this
    /// (and it has at least one nonzero voxel).
    pub min_nonzero_fraction: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            patch_size: [16, 16, 16],
            mask_ratio: 0.75,
            p_drop: 0.2,
            min_nonzero_fraction: 0.0,
        }
    }
}

pub fn patchify(s: &PreparedSession, patch: Dims, min_nonzero_fraction: f64) -> Result<PatchSet> {
    let dims = s.dims();
    let mut grid = [0usize; 3];
    for a in 0..3 {
        if patch[a] == 0 || dims[a] % patch[a] != 0 {
            return Err(Error::Shape(format!("dims {dims:?} not divisible by patch {patch:?}")));
        }
        grid[a] = dims[a] / patch[a];
    }
    let plen = patch[0] * patch[1] * patch[2];
    let mut patches = Vec::new();
    for (m, v) in s.volumes.values().enumerate() {
        if v.dims != dims {
            return Err(Error::Shape(format!(
                "modality '{}' has dims {:?}, expected {dims:?}",
                v.modality, v.dims
            )));
        }
        for gx in 0..grid[0] {
            for gy in 0..grid[1] {
                for gz in 0..grid[2] {
                    patches.push(extract(&v.voxels, dims, v.valid_extent, patch, m, [gx, gy, gz], plen, min_nonzero_fraction));
                }
            }
        }
    }
    Ok(PatchSet {
        modalities: s.modality_names(),
        grid,
        patch,
        patches,
    })
}

#[allow(clippy::too_many_arguments)]
fn extract(
    voxels: &[f64],
    dims: Dims,
    extent: Extent,
    patch: Dims,
    modality: usize,
    coords: [usize; 3],
    plen: usize,
    min_nonzero_fraction: f64,
) -> Patch {
    let mut out = Vec::with_capacity(plen);
    let mut in_extent = Vec::with_capacity(plen);
    let mut count = 0;
    let mut nonzero = 0;
    for i in 0..patch[0] {
        for j in 0..patch[1] {
            for k in 0..patch[2] {
                let (x, y, z) = (coords[0] * patch[0] + i, coords[1] * patch[1] + j, coords[2] * patch[2] + k);
                let inside = extent.contains(x, y, z);
                let val = if inside { voxels[offset(dims, x, y, z)] } else { 0.0 };
                count += usize::from(inside);
                nonzero += usize::from(val != 0.0);
                out.push(val);
                in_extent.push(inside);
            }
        }
    }
    let valid = count >= 1 && nonzero >= 1 && nonzero as f64 >= min_nonzero_fraction * plen as f64;
    Patch {
        modality,
        coords,
        voxels: out,
        in_extent,
        in_extent_count: count,
        valid,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub hidden: BTreeSet<usize>,
    pub dropped_modalities: BTreeSet<usize>,
    pub ratio: f64,
    /// Set when the visibility guard cancelled a drop or kept a patch visible.
    pub guard_applied: bool,
}

impl MaskPlan {
    pub fn none() -> Self {
        Self {
            hidden: BTreeSet::new(),
            dropped_modalities: BTreeSet::new(),
            ratio: 0.0,
            guard_applied: false,
        }
    }
}

/// `round` with halves away from zero, for non-negative inputs.
pub fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// Sample a padding-aware mask: optionally hide every valid patch of one
/// modality, then hide `round(ratio * V)` of the remaining `V` valid patches.
/// At least one valid patch stays visible whenever one exists.
pub fn sample_mask(ps: &PatchSet, ratio: f64, p_drop: f64, rng: &mut Stream) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Range(format!("mask ratio {ratio} outside [0,1]")));
    }
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Range(format!("drop probability {p_drop} outside [0,1]")));
    }
    let valid = ps.valid_indices();
    let n_mod = ps.modalities.len();

    let mut dropped = None;
    if n_mod >= 2 && rng.bernoulli(p_drop) {
        dropped = Some(rng.below(n_mod));
    }

    let mut guard = false;
    loop {
        let (drop_set, rest): (Vec<usize>, Vec<usize>) =
            valid.iter().partition(|&&i| Some(ps.patches[i].modality) == dropped);
        let mut k = round_half_away(ratio * rest.len() as f64);
        if k >= rest.len() && !valid.is_empty() {
            if dropped.is_some() && !drop_set.is_empty() {
                // everything would be hidden; undo the modality drop and retry
                dropped = None;
                guard = true;
                continue;
            }
            if k > 0 {
                k = rest.len() - 1;
                guard = true;
            }
        }
        let picks = rng.choose(rest.len(), k);
        let mut hidden: BTreeSet<usize> = drop_set.into_iter().collect();
        hidden.extend(picks.into_iter().map(|j| rest[j]));
        return Ok(MaskPlan {
            hidden,
            dropped_modalities: dropped.into_iter().collect(),
            ratio,
            guard_applied: guard,
        });
    }
}

/// One session of a token batch.
#[derive(Debug, Clone)]
pub struct SessionTokens {
    pub case_id: String,
    pub patches: PatchSet,
    pub plan: MaskPlan,
    /// One embedding per modality, in `patches.modalities` order.
    pub embeddings: Vec<ModalityEmbedding>,
}

impl SessionTokens {
    pub fn visible(&self) -> Vec<usize> {
        self.patches
            .patches
            .iter()
            .enumerate()
            .filter(|(i, p)| p.valid && !self.plan.hidden.contains(i))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.plan.hidden.iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub sessions: Vec<SessionTokens>,
}

impl TokenBatch {
    pub fn token_count(&self) -> usize {
        self.sessions.iter().map(|s| s.patches.patches.len()).sum()
    }
}

pub fn embed_all(names: &[String], embedder: &ModalityEmbedder) -> Result<Vec<ModalityEmbedding>> {
    names.iter().map(|n| embedder.embed(n)).collect()
}

/// Tokenize and mask each session; session `i` draws its mask from the stream
/// `(mask_seed, case hash, i)`.
pub fn assemble_batch(
    sessions: &[PreparedSession],
    cfg: &TokenizerConfig,
    embedder: &ModalityEmbedder,
    mask_seed: u64,
) -> Result<TokenBatch> {
    if sessions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let out = sessions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let patches = patchify(s, cfg.patch_size, cfg.min_nonzero_fraction)?;
            let embeddings = embed_all(&patches.modalities, embedder)?;
            let mut stream = Stream::derived(mask_seed, &[rng::tag::MASK, rng::stable_hash(&s.case_id), i as u64]);
            let plan = sample_mask(&patches, cfg.mask_ratio, cfg.p_drop, &mut stream)?;
            Ok(SessionTokens {
                case_id: s.case_id.clone(),
                patches,
                plan,
                embeddings,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenBatch { sessions: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::EmbeddingSource;
    use crate::volume::Volume;
    use std::collections::BTreeMap;

    fn prepared(mods: &[&str], dims: Dims, extent: Extent) -> PreparedSession {
        let mut volumes = BTreeMap::new();
        for m in mods {
            let mut vox = vec![0.0; dims[0] * dims[1] * dims[2]];
            for x in extent.lo[0]..extent.hi[0] {
                for y in extent.lo[1]..extent.hi[1] {
                    for z in extent.lo[2]..extent.hi[2] {
                        vox[offset(dims, x, y, z)] = 1.0 + ((x + y + z) % 3) as f64;
                    }
                }
            }
            volumes.insert(
                m.to_string(),
                Volume {
                    dims,
                    voxels: vox,
                    modality: m.to_string(),
                    valid_extent: extent,
                },
            );
        }
        PreparedSession {
            case_id: "c".into(),
            volumes,
            label: None,
            spacing: [1.0; 3],
            applied_ops: vec![],
        }
    }

    #[test]
    fn patch_counts() {
        let s = prepared(&["t1"], [32; 3], Extent::full([32; 3]));
        assert_eq!(patchify(&s, [16; 3], 0.0).unwrap().patches.len(), 8);
        let s2 = prepared(&["flair", "t1"], [32; 3], Extent::full([32; 3]));
        let ps = patchify(&s2, [16; 3], 0.0).unwrap();
        assert_eq!(ps.patches.len(), 16);
        let mods: BTreeSet<usize> = ps.patches.iter().map(|p| p.modality).collect();
        assert_eq!(mods, BTreeSet::from([0, 1]));
        assert!(matches!(patchify(&s, [5; 3], 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn out_of_extent_patch_is_invalid() {
        let s = prepared(&["t1"], [8; 3], Extent { lo: [0; 3], hi: [4, 8, 8] });
        let ps = patchify(&s, [4; 3], 0.0).unwrap();
        for p in &ps.patches {
            assert_eq!(p.valid, p.coords[0] == 0);
            if p.coords[0] == 1 {
                assert_eq!(p.in_extent_count, 0);
            }
        }
    }

    #[test]
    fn mask_examples() {
        let s = prepared(&["t1"], [8, 8, 20], Extent { lo: [0; 3], hi: [8, 8, 20] });
        let ps = patchify(&s, [4, 4, 2], 0.0).unwrap();
        assert_eq!(ps.valid_indices().len(), 40);
        let none = sample_mask(&ps, 0.0, 0.0, &mut Stream::new(1)).unwrap();
        assert!(none.hidden.is_empty());
        let all = sample_mask(&ps, 1.0, 0.0, &mut Stream::new(1)).unwrap();
        assert_eq!(all.hidden.len(), 39);
        assert!(all.guard_applied);
        assert!(matches!(sample_mask(&ps, 1.5, 0.0, &mut Stream::new(1)), Err(Error::Range(_))));
    }

    #[test]
    fn ten_valid_half_hidden() {
        let s = prepared(&["t1"], [4, 4, 40], Extent { lo: [0; 3], hi: [4, 4, 40] });
        let ps = patchify(&s, [4; 3], 0.0).unwrap();
        assert_eq!(ps.valid_indices().len(), 10);
        let plan = sample_mask(&ps, 0.5, 0.0, &mut Stream::new(3)).unwrap();
        assert_eq!(plan.hidden.len(), 5);
        assert!(plan.hidden.iter().all(|i| ps.patches[*i].valid));
    }

    #[test]
    fn drop_hides_whole_modality() {
        let s = prepared(&["flair", "t1"], [16; 3], Extent::full([16; 3]));
        let ps = patchify(&s, [4; 3], 0.0).unwrap();
        let plan = sample_mask(&ps, 0.5, 1.0, &mut Stream::new(11)).unwrap();
        assert_eq!(plan.dropped_modalities.len(), 1);
        let m = *plan.dropped_modalities.iter().next().unwrap();
        for i in ps.modality_range(m) {
            assert!(plan.hidden.contains(&i));
        }
        assert_eq!(plan.hidden.len(), 64 + 32);
    }

    #[test]
    fn guard_cancels_drop_at_full_ratio() {
        let s = prepared(&["flair", "t1"], [8; 3], Extent::full([8; 3]));
        let ps = patchify(&s, [4; 3], 0.0).unwrap();
        let plan = sample_mask(&ps, 1.0, 1.0, &mut Stream::new(2)).unwrap();
        assert!(plan.guard_applied);
        assert!(plan.dropped_modalities.is_empty());
        assert_eq!(plan.hidden.len(), 15);
    }

    #[test]
    fn batch_assembly() {
        let e = ModalityEmbedder::new(EmbeddingSource::hash_seeded(8));
        let s = prepared(&["t1"], [32; 3], Extent::full([32; 3]));
        let cfg = TokenizerConfig {
            mask_ratio: 0.5,
            p_drop: 0.0,
            ..TokenizerConfig::default()
        };
        let b = assemble_batch(std::slice::from_ref(&s), &cfg, &e, 0).unwrap();
        assert_eq!(b.token_count(), 8);
        assert_eq!(b.sessions[0].plan.hidden.len(), 4);
        assert_eq!(b.sessions[0].visible().len(), 4);

        let small = prepared(&["t1"], [16; 3], Extent::full([16; 3]));
        let cfg4 = TokenizerConfig {
            patch_size: [4; 3],
            ..cfg
        };
        let two = assemble_batch(&[small.clone(), small], &cfg4, &e, 0).unwrap();
        assert_ne!(two.sessions[0].plan.hidden, two.sessions[1].plan.hidden);
        assert!(matches!(assemble_batch(&[], &cfg, &e, 0), Err(Error::EmptyBatch)));
    }
}
