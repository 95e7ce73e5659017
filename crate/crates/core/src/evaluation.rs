//! Overlap and surface-distance metrics, inference helpers, the
//! modality-availability matrix, and modality imputation.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::Task;
use crate::corpus::Session;
use crate::error::{Error, Result};
use crate::modality::ModalityEmbedder;
use crate::network::{self, Bound, ModelParams, NetConfig, QueryInputs};
use crate::preprocess::{preprocess_session, PreparedSession, PreprocessConfig};
use crate::tensor::Matrix;
use crate::tokenizer::{embed_all, grid_coords, patchify, MaskPlan, SessionTokens};
use crate::volume::{offset, voxel_count, Dims, Extent, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub dims: Dims,
    pub bits: Vec<bool>,
    pub spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(dims: Dims, bits: Vec<bool>, spacing: [f64; 3]) -> Result<Self> {
        if bits.len() != voxel_count(dims) {
            return Err(Error::Shape(format!("{} bits for dims {dims:?}", bits.len())));
        }
        if spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Range(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, bits, spacing })
    }

    pub fn empty(dims: Dims, spacing: [f64; 3]) -> Self {
        Self {
            dims,
            bits: vec![false; voxel_count(dims)],
            spacing,
        }
    }

    /// Voxels `>= threshold`.
    pub fn from_values(dims: Dims, values: &[f64], threshold: f64, spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, values.iter().map(|v| *v >= threshold).collect(), spacing)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[offset(self.dims, x, y, z)]
    }

    /// Set voxels with at least one face neighbor unset or outside the grid.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let d = self.dims;
        let mut out = Vec::new();
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    if !self.get(x, y, z) {
                        continue;
                    }
                    let p = [x, y, z];
                    let boundary = (0..3).any(|a| {
                        let mut lo = p;
                        let mut hi = p;
                        let lo_unset = p[a] == 0 || {
                            lo[a] -= 1;
                            !self.get(lo[0], lo[1], lo[2])
                        };
                        let hi_unset = p[a] + 1 == d[a] || {
                            hi[a] += 1;
                            !self.get(hi[0], hi[1], hi[2])
                        };
                        lo_unset || hi_unset
                    });
                    if boundary {
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

fn same_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("mask dims {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// `2|a & b| / (|a| + |b|)`, 1 when both are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_grid(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        na += *x as usize;
        nb += *y as usize;
        inter += (*x && *y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Sensitivity and specificity of `pred` against `reference`; a ratio with a
/// zero denominator is 1.
pub fn sensitivity_specificity(pred: &BinaryMask, reference: &BinaryMask) -> Result<(f64, f64)> {
    same_grid(pred, reference)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (p, r) in pred.bits.iter().zip(&reference.bits) {
        match (*p, *r) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    Ok((ratio(tp, tp + fneg), ratio(tn, tn + fp)))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Exact squared Euclidean distance transform of a 1D sampled function with
/// sample spacing `s` (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let sep = ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64)) / (2.0 * s2 * (q - p) as f64);
            // z[0] is -inf, so this never pops the first parabola
            if sep <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = sep;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        out[q] = d * d + f[v[k]];
    }
}

/// Squared physical distance from every voxel to the nearest seed voxel.
fn squared_distance_to(dims: Dims, seeds: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; voxel_count(dims)];
    for s in seeds {
        d[offset(dims, s[0], s[1], s[2])] = 0.0;
    }
    let maxn = dims[0].max(dims[1]).max(dims[2]);
    let mut f = vec![0.0; maxn];
    let mut out = vec![0.0; maxn];
    let mut v = vec![0usize; maxn];
    let mut z = vec![0.0; maxn + 1];
    for axis in 0..3 {
        let n = dims[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i in 0..dims[o1] {
            for j in 0..dims[o2] {
                let idx = |t: usize| {
                    let mut c = [0; 3];
                    c[axis] = t;
                    c[o1] = i;
                    c[o2] = j;
                    offset(dims, c[0], c[1], c[2])
                };
                for t in 0..n {
                    f[t] = d[idx(t)];
                }
                edt_1d(&f[..n], spacing[axis], &mut out[..n], &mut v, &mut z);
                for t in 0..n {
                    d[idx(t)] = out[t];
                }
            }
        }
    }
    d
}

/// Distances from each surface voxel of `a` to the surface of `b`, then from
/// `b` to `a`, concatenated.
pub fn surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Vec<f64>> {
    same_grid(a, b)?;
    if a.spacing != b.spacing {
        return Err(Error::Shape(format!("spacing {:?} vs {:?}", a.spacing, b.spacing)));
    }
    let sa = a.surface();
    let sb = b.surface();
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::EmptyMask);
    }
    let to_b = squared_distance_to(b.dims, &sb, b.spacing);
    let to_a = squared_distance_to(a.dims, &sa, a.spacing);
    let mut out = Vec::with_capacity(sa.len() + sb.len());
    out.extend(sa.iter().map(|p| to_b[offset(a.dims, p[0], p[1], p[2])].sqrt()));
    out.extend(sb.iter().map(|p| to_a[offset(a.dims, p[0], p[1], p[2])].sqrt()));
    Ok(out)
}

/// Linear interpolation between order statistics at `q * (n - 1)`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the combined bidirectional surface distances.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let mut d = surface_distances(a, b)?;
    Ok(percentile(&mut d, 0.95))
}

/// Tokens of a fully visible session.
pub fn all_visible_tokens(s: &PreparedSession, net: &NetConfig, embedder: &ModalityEmbedder) -> Result<SessionTokens> {
    let patches = patchify(s, net.patch_size, 0.0)?;
    let embeddings = embed_all(&patches.modalities, embedder)?;
    Ok(SessionTokens {
        case_id: s.case_id.clone(),
        patches,
        plan: MaskPlan::none(),
        embeddings,
    })
}

pub fn classify_logits(params: &ModelParams, net: &NetConfig, embedder: &ModalityEmbedder, s: &PreparedSession) -> Result<Vec<f64>> {
    let st = all_visible_tokens(s, net, embedder)?;
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params);
    let out = network::classify_session(&mut g, &b, net, &st)?;
    Ok(g.value(out).data.clone())
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
        .0
}

/// Voxel logits of label channel 0 on the prepared grid.
pub fn segment_logits(params: &ModelParams, net: &NetConfig, embedder: &ModalityEmbedder, s: &PreparedSession) -> Result<Vec<f64>> {
    let st = all_visible_tokens(s, net, embedder)?;
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params);
    let out = network::segment_session(&mut g, &b, net, &st)?;
    Ok(network::patches_to_volume(g.value(out), st.patches.grid, st.patches.patch, 0))
}

pub fn segment(params: &ModelParams, net: &NetConfig, embedder: &ModalityEmbedder, s: &PreparedSession) -> Result<BinaryMask> {
    let logits = segment_logits(params, net, embedder, s)?;
    BinaryMask::from_values(s.dims(), &logits.iter().map(|x| if *x > 0.0 { 1.0 } else { 0.0 }).collect::<Vec<_>>(), 0.5, s.spacing)
}

/// Reference mask on the prepared grid (empty when the case has no label).
pub fn reference_mask(s: &PreparedSession) -> Result<BinaryMask> {
    match &s.label {
        Some(l) => BinaryMask::from_values(l.dims, &l.voxels, 0.5, s.spacing),
        None => Ok(BinaryMask::empty(s.dims(), s.spacing)),
    }
}

/// Lesion presence: class 1 when the label has any foreground voxel.
pub fn case_class(s: &PreparedSession) -> usize {
    s.label.as_ref().map_or(0, |l| l.voxels.iter().any(|v| *v >= 0.5) as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityConfig {
    pub name: String,
    pub available: BTreeSet<String>,
}

impl AvailabilityConfig {
    pub fn new(name: &str, available: &[&str]) -> Result<Self> {
        if available.is_empty() {
            return Err(Error::Config(format!("availability config '{name}' lists no modalities")));
        }
        Ok(Self {
            name: name.to_string(),
            available: available
                .iter()
                .map(|m| crate::modality::normalize_modality_name(m))
                .collect::<Result<_>>()?,
        })
    }
}

/// The six evaluation configurations over T1, T1c, T2 and FLAIR.
pub fn default_availability() -> Vec<AvailabilityConfig> {
    [
        ("Complete", &["t1", "t1c", "t2", "flair"][..]),
        ("Dropped (T1c)", &["t1", "t2", "flair"][..]),
        ("Dropped (T2)", &["t1", "t1c", "flair"][..]),
        ("Dropped (FLAIR)", &["t1", "t1c", "t2"][..]),
        ("Unseen (T1+FLAIR only)", &["t1", "flair"][..]),
        ("Unseen (T2 only)", &["t2"][..]),
    ]
    .iter()
    .map(|(n, m)| AvailabilityConfig::new(n, m).expect("static configs are valid"))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub config: String,
    pub dice: Option<f64>,
    pub hd95: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub n_cases: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseMetrics {
    pub dice: f64,
    pub hd95: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub struct Evaluator<'a> {
    pub params: &'a ModelParams,
    pub net: &'a NetConfig,
    pub embedder: &'a ModalityEmbedder,
    pub preprocess: PreprocessConfig,
}

impl<'a> Evaluator<'a> {
    pub fn new(params: &'a ModelParams, net: &'a NetConfig, embedder: &'a ModalityEmbedder, target_shape: Dims) -> Self {
        Self {
            params,
            net,
            embedder,
            preprocess: PreprocessConfig::deterministic(target_shape, net.patch_size),
        }
    }

    pub fn segmentation_case(&self, s: &Session) -> Result<CaseMetrics> {
        let p = preprocess_session(s, &self.preprocess)?;
        let pred = segment(self.params, self.net, self.embedder, &p)?;
        let reference = reference_mask(&p)?;
        let (sensitivity, specificity) = sensitivity_specificity(&pred, &reference)?;
        let hd = match hd95(&pred, &reference) {
            Ok(v) => Some(v),
            Err(Error::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        Ok(CaseMetrics {
            dice: dice(&pred, &reference)?,
            hd95: hd,
            sensitivity,
            specificity,
        })
    }

    /// Predicted and reference class for one case.
    pub fn classification_case(&self, s: &Session) -> Result<(usize, usize)> {
        let p = preprocess_session(s, &self.preprocess)?;
        let logits = classify_logits(self.params, self.net, self.embedder, &p)?;
        Ok((argmax(&logits), case_class(&p)))
    }

    /// Metrics over the given sessions with every present modality.
    pub fn evaluate(&self, name: &str, task: Task, sessions: &[Session], n_skipped: usize) -> Result<MetricRow> {
        let n = sessions.len();
        let mean = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
        match task {
            Task::Segmentation => {
                let cases: Vec<CaseMetrics> = sessions.par_iter().map(|s| self.segmentation_case(s)).collect::<Result<_>>()?;
                Ok(MetricRow {
                    config: name.to_string(),
                    dice: mean(cases.iter().map(|c| c.dice).collect()),
                    hd95: mean(cases.iter().filter_map(|c| c.hd95).collect()),
                    sensitivity: mean(cases.iter().map(|c| c.sensitivity).collect()),
                    specificity: mean(cases.iter().map(|c| c.specificity).collect()),
                    n_cases: n,
                    n_skipped,
                })
            }
            Task::Classification => {
                let cases: Vec<(usize, usize)> = sessions.par_iter().map(|s| self.classification_case(s)).collect::<Result<_>>()?;
                let count = |f: &dyn Fn(usize, usize) -> bool| cases.iter().filter(|(p, r)| f(*p, *r)).count();
                let tp = count(&|p, r| p == 1 && r == 1);
                let fneg = count(&|p, r| p != 1 && r == 1);
                let tn = count(&|p, r| p != 1 && r != 1);
                let fp = count(&|p, r| p == 1 && r != 1);
                let (sens, spec) = if n == 0 { (None, None) } else { (Some(ratio(tp, tp + fneg)), Some(ratio(tn, tn + fp))) };
                Ok(MetricRow {
                    config: name.to_string(),
                    dice: None,
                    hd95: None,
                    sensitivity: sens,
                    specificity: spec,
                    n_cases: n,
                    n_skipped,
                })
            }
        }
    }
}

/// Evaluate every availability configuration. Each session is restricted to
/// the modalities it has in common with the configuration; sessions with no
/// overlap are skipped and counted.
pub fn availability_matrix_eval(
    ev: &Evaluator,
    model_task: Option<Task>,
    task: Task,
    sessions: &[Session],
    configs: &[AvailabilityConfig],
) -> Result<Vec<MetricRow>> {
    if model_task != Some(task) {
        return Err(Error::Config(format!(
            "model was trained for {model_task:?}, evaluation requested {task:?}"
        )));
    }
    if configs.is_empty() {
        return Err(Error::Config("no availability configurations".into()));
    }
    configs
        .iter()
        .map(|c| {
            let mut kept = Vec::new();
            let mut skipped = 0;
            for s in sessions {
                let avail: Vec<String> = s.modalities().filter(|m| c.available.contains(*m)).map(String::from).collect();
                if avail.is_empty() {
                    log::info!("{}: skipping '{}' (no available modality)", c.name, s.case_id);
                    skipped += 1;
                } else {
                    kept.push(s.restricted_to(&avail));
                }
            }
            ev.evaluate(&c.name, task, &kept, skipped)
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub const CSV_HEADER: &str = "config,dice,hd95,sensitivity,specificity,n_cases,n_skipped";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let name = if r.config.contains(',') || r.config.contains('"') {
            format!("\"{}\"", r.config.replace('"', "\"\""))
        } else {
            r.config.clone()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            fmt_opt(r.dice),
            fmt_opt(r.hd95),
            fmt_opt(r.sensitivity),
            fmt_opt(r.specificity),
            r.n_cases,
            r.n_skipped
        ));
    }
    out
}

/// Reconstruct `target` from the other modalities of a prepared session.
///
/// Source patches are all visible; every grid cell of the target is a
/// hidden query conditioned on the target's embedding.
pub fn impute_modality(
    params: &ModelParams,
    net: &NetConfig,
    embedder: &ModalityEmbedder,
    s: &PreparedSession,
    target: &str,
) -> Result<Volume> {
    let target = crate::modality::normalize_modality_name(target)?;
    let mut src = s.clone();
    src.volumes.remove(&target);
    let first = src
        .volumes
        .values()
        .next()
        .ok_or_else(|| Error::Config(format!("no source modality to impute '{target}' from")))?
        .clone();
    let st = all_visible_tokens(&src, net, embedder)?;
    let vis = network::visible_inputs(&st);
    let grid = st.patches.grid;
    let n_grid = st.patches.grid_len();
    let emb = embedder.embed(&target)?;
    let mut cond = Matrix::zeros(n_grid, emb.vector.len());
    for r in 0..n_grid {
        cond.row_mut(r).copy_from_slice(&emb.vector);
    }
    let base = st.patches.patches.len();
    let queries = QueryInputs {
        coords: (0..n_grid).map(|i| grid_coords(grid, i)).collect(),
        cond,
        keys: (0..n_grid).map(|i| base + i).collect(),
    };
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params);
    let enc = network::encode_tokens(&mut g, &b, net, &vis, &st.case_id)?;
    let out = network::decode_tokens(&mut g, &b, net, &vis, enc.latents, &queries)?.expect("grid is non-empty");
    let voxels = network::patches_to_volume(g.value(out), grid, st.patches.patch, 0);
    let valid_extent = s.volumes.get(&target).map_or(first.valid_extent, |v| v.valid_extent);
    Ok(Volume {
        dims: first.dims,
        voxels,
        modality: target,
        valid_extent,
    })
}

/// Mean squared error over the valid extent of `truth`.
pub fn imputation_error(imputed: &Volume, truth: &Volume) -> Result<f64> {
    if imputed.dims != truth.dims {
        return Err(Error::Shape(format!("dims {:?} vs {:?}", imputed.dims, truth.dims)));
    }
    let e: Extent = truth.valid_extent;
    if e.is_empty() {
        return Err(Error::DegenerateLoss);
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for x in e.lo[0]..e.hi[0] {
        for y in e.lo[1]..e.hi[1] {
            for z in e.lo[2]..e.hi[2] {
                let i = offset(truth.dims, x, y, z);
                s += (imputed.voxels[i] - truth.voxels[i]).powi(2);
                n += 1;
            }
        }
    }
    Ok(s / n as f64)
}
