//! Loading-time preprocessing and augmentation.
//!
//! Pipeline order per modality: crop/pad to the target shape, pad to a
//! multiple of the patch size, bias field, Gaussian noise, contrast (gamma),
//! flip, rotation, nonzero z-score normalization, sanitize. Flip and rotation
//! decisions are sampled once per session and applied to every modality and
//! to the label volume so that modalities stay aligned.
//!
//! Stochastic ops are split into a sampler that reads a [`Stream`] and a pure
//! `apply_*` function, so that every op can be driven with fixed parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Session;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::volume::{offset, voxel_count, Dims, Extent, RawVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_shape: Dims,
    pub patch_size: Dims,
    pub bias_field_p: f64,
    pub bias_field_coeff: (f64, f64),
    pub noise_p: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub contrast_p: f64,
    pub gamma_range: (f64, f64),
    pub flip_p: f64,
    /// Radians; rotation angles are drawn from `[-bound, bound]` per axis.
    pub rotation_bound: f64,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_shape: [128, 128, 128],
            patch_size: [16, 16, 16],
            bias_field_p: 0.3,
            bias_field_coeff: (0.3, 0.6),
            noise_p: 0.3,
            noise_mean: 0.0,
            noise_std: 0.05,
            contrast_p: 0.3,
            gamma_range: (0.7, 1.5),
            flip_p: 0.5,
            rotation_bound: std::f64::consts::PI / 12.0,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    /// Every stochastic op disabled.
    pub fn deterministic(target_shape: Dims, patch_size: Dims) -> Self {
        Self {
            target_shape,
            patch_size,
            bias_field_p: 0.0,
            noise_p: 0.0,
            contrast_p: 0.0,
            flip_p: 0.0,
            rotation_bound: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0,1], got {p}")))
            }
        };
        prob("bias_field_p", self.bias_field_p)?;
        prob("noise_p", self.noise_p)?;
        prob("contrast_p", self.contrast_p)?;
        prob("flip_p", self.flip_p)?;
        if self.target_shape.iter().chain(&self.patch_size).any(|&d| d == 0) {
            return Err(Error::Config("target_shape and patch_size must be positive".into()));
        }
        let (lo, hi) = self.bias_field_coeff;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::Config(format!("bias_field_coeff must satisfy 0 <= lo <= hi, got ({lo}, {hi})")));
        }
        let (glo, ghi) = self.gamma_range;
        if !(glo > 0.0 && glo <= ghi) {
            return Err(Error::Config(format!("gamma_range must be positive and ordered, got ({glo}, {ghi})")));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if !(self.rotation_bound >= 0.0) {
            return Err(Error::Config("rotation_bound must be >= 0".into()));
        }
        Ok(())
    }
}

/// One entry of the augmentation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedOp {
    pub op: String,
    /// `None` for session-wide (geometric) decisions.
    pub modality: Option<String>,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSession {
    pub case_id: String,
    /// Same keys and order as the source session.
    pub volumes: BTreeMap<String, Volume>,
    /// Binary label transformed with the same geometry, if present.
    pub label: Option<Volume>,
    pub spacing: [f64; 3],
    pub applied_ops: Vec<AppliedOp>,
}

impl PreparedSession {
    pub fn dims(&self) -> Dims {
        self.volumes.values().next().map(|v| v.dims).unwrap_or([0; 3])
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.volumes.keys().cloned().collect()
    }

    pub fn log_json_lines(&self) -> String {
        self.applied_ops
            .iter()
            .filter_map(|op| serde_json::to_string(op).ok())
            .map(|l| l + "\n")
            .collect()
    }
}

/// Split `total` into symmetric low/high amounts, extra on the high side.
fn split(total: usize) -> (usize, usize) {
    (total / 2, total - total / 2)
}

pub fn crop_or_pad(v: &RawVolume, target: Dims) -> Volume {
    let mut src_lo = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    let mut len = [0usize; 3];
    for a in 0..3 {
        let (n, t) = (v.dims[a], target[a]);
        if n >= t {
            src_lo[a] = split(n - t).0;
            len[a] = t;
        } else {
            dst_lo[a] = split(t - n).0;
            len[a] = n;
        }
    }
    let mut out = vec![0.0; voxel_count(target)];
    for x in 0..len[0] {
        for y in 0..len[1] {
            let s = offset(v.dims, src_lo[0] + x, src_lo[1] + y, src_lo[2]);
            let d = offset(target, dst_lo[0] + x, dst_lo[1] + y, dst_lo[2]);
            out[d..d + len[2]].copy_from_slice(&v.voxels[s..s + len[2]]);
        }
    }
    Volume {
        dims: target,
        voxels: out,
        modality: v.modality.clone(),
        valid_extent: Extent {
            lo: dst_lo,
            hi: [dst_lo[0] + len[0], dst_lo[1] + len[1], dst_lo[2] + len[2]],
        },
    }
}

fn pad_to(v: &Volume, target: Dims) -> Volume {
    let mut lo = [0usize; 3];
    for a in 0..3 {
        lo[a] = split(target[a] - v.dims[a]).0;
    }
    let mut out = vec![0.0; voxel_count(target)];
    for x in 0..v.dims[0] {
        for y in 0..v.dims[1] {
            let s = offset(v.dims, x, y, 0);
            let d = offset(target, lo[0] + x, lo[1] + y, lo[2]);
            out[d..d + v.dims[2]].copy_from_slice(&v.voxels[s..s + v.dims[2]]);
        }
    }
    Volume {
        dims: target,
        voxels: out,
        modality: v.modality.clone(),
        valid_extent: v.valid_extent.shifted(lo),
    }
}

pub fn divisible_pad(v: &Volume, patch: Dims) -> Volume {
    let mut target = v.dims;
    for a in 0..3 {
        target[a] = v.dims[a].div_ceil(patch[a]) * patch[a];
    }
    if target == v.dims {
        return v.clone();
    }
    pad_to(v, target)
}

/// Coordinate of index `i` on an axis of length `n`, mapped onto `[-1, 1]`.
#[inline]
fn unit_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Monomial exponents `(i, j, k)` with `i + j + k <= 3`, in a fixed order.
pub fn bias_field_terms() -> Vec<[i32; 3]> {
    let mut out = Vec::with_capacity(20);
    for i in 0..=3 {
        for j in 0..=(3 - i) {
            for k in 0..=(3 - i - j) {
                out.push([i, j, k]);
            }
        }
    }
    out
}

/// Multiply valid voxels by `exp(sum_t c_t x^i y^j z^k)`.
pub fn apply_bias_field(v: &Volume, coeffs: &[f64]) -> Volume {
    let terms = bias_field_terms();
    assert_eq!(coeffs.len(), terms.len(), "bias field needs one coefficient per term");
    let dims = v.dims;
    let mut out = v.clone();
    out.map_valid(|x, [i, j, k]| {
        let (cx, cy, cz) = (unit_coord(i, dims[0]), unit_coord(j, dims[1]), unit_coord(k, dims[2]));
        let poly: f64 = terms
            .iter()
            .zip(coeffs)
            .map(|(t, c)| c * cx.powi(t[0]) * cy.powi(t[1]) * cz.powi(t[2]))
            .sum();
        x * poly.exp()
    });
    out
}

/// Returns the sampled coefficients, or `None` when the op is skipped.
pub fn sample_bias_field(rng: &mut Stream, p: f64, coeff_range: (f64, f64)) -> Option<Vec<f64>> {
    if !rng.bernoulli(p) {
        return None;
    }
    let coeffs = bias_field_terms()
        .iter()
        .map(|_| {
            let mag = rng.uniform_range(coeff_range.0, coeff_range.1);
            if rng.bernoulli(0.5) {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Some(coeffs)
}

pub fn rand_bias_field(v: &Volume, rng: &mut Stream, p: f64, coeff_range: (f64, f64)) -> Volume {
    match sample_bias_field(rng, p, coeff_range) {
        Some(c) => apply_bias_field(v, &c),
        None => v.clone(),
    }
}

/// Adds one normal draw per valid voxel (C order). Returns whether it fired.
pub fn rand_gaussian_noise(v: &Volume, rng: &mut Stream, p: f64, mean: f64, std: f64) -> (Volume, bool) {
    if !rng.bernoulli(p) {
        return (v.clone(), false);
    }
    let mut out = v.clone();
    out.map_valid(|x, _| x + mean + std * rng.normal());
    (out, true)
}

fn valid_min_max(v: &Volume) -> Option<(f64, f64)> {
    let vals = v.valid_values();
    if vals.is_empty() {
        return None;
    }
    let mn = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((mn, mx))
}

pub fn apply_gamma(v: &Volume, gamma: f64) -> Volume {
    let Some((mn, mx)) = valid_min_max(v) else {
        return v.clone();
    };
    let range = mx - mn;
    if !(range > 0.0) || !range.is_finite() {
        return v.clone();
    }
    let mut out = v.clone();
    out.map_valid(|x, _| ((x - mn) / range).powf(gamma) * range + mn);
    out
}

pub fn rand_adjust_contrast(v: &Volume, rng: &mut Stream, p: f64, gamma_range: (f64, f64)) -> (Volume, Option<f64>) {
    if !rng.bernoulli(p) {
        return (v.clone(), None);
    }
    let gamma = rng.uniform_range(gamma_range.0, gamma_range.1);
    (apply_gamma(v, gamma), Some(gamma))
}

fn flip_grid(voxels: &[f64], dims: Dims, axes: [bool; 3]) -> Vec<f64> {
    let mut out = vec![0.0; voxels.len()];
    for x in 0..dims[0] {
        let sx = if axes[0] { dims[0] - 1 - x } else { x };
        for y in 0..dims[1] {
            let sy = if axes[1] { dims[1] - 1 - y } else { y };
            for z in 0..dims[2] {
                let sz = if axes[2] { dims[2] - 1 - z } else { z };
                out[offset(dims, x, y, z)] = voxels[offset(dims, sx, sy, sz)];
            }
        }
    }
    out
}

pub fn apply_flip(v: &Volume, axes: [bool; 3]) -> Volume {
    if axes == [false; 3] {
        return v.clone();
    }
    Volume {
        dims: v.dims,
        voxels: flip_grid(&v.voxels, v.dims, axes),
        modality: v.modality.clone(),
        valid_extent: v.valid_extent.flipped(v.dims, axes),
    }
}

/// Three independent Bernoulli draws, axis 0 first.
pub fn sample_flip(rng: &mut Stream, p: f64) -> [bool; 3] {
    [rng.bernoulli(p), rng.bernoulli(p), rng.bernoulli(p)]
}

pub fn rand_flip(v: &Volume, rng: &mut Stream, p: f64) -> (Volume, [bool; 3]) {
    let axes = sample_flip(rng, p);
    (apply_flip(v, axes), axes)
}

/// `Rz(c) * Ry(b) * Rx(a)`: rotate about axis 0 first, then 1, then 2.
pub fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Trilinear sample with border replication.
fn sample_trilinear(voxels: &[f64], dims: Dims, p: [f64; 3]) -> f64 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let c = p[a].clamp(0.0, max);
        let f = c.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(dims[a] - 1);
        w[a] = c - f;
    }
    let at = |x: usize, y: usize, z: usize| voxels[offset(dims, x, y, z)];
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(i0[0], i0[1], i0[2]), at(i1[0], i0[1], i0[2]), w[0]);
    let c01 = lerp(at(i0[0], i0[1], i1[2]), at(i1[0], i0[1], i1[2]), w[0]);
    let c10 = lerp(at(i0[0], i1[1], i0[2]), at(i1[0], i1[1], i0[2]), w[0]);
    let c11 = lerp(at(i0[0], i1[1], i1[2]), at(i1[0], i1[1], i1[2]), w[0]);
    let c0 = lerp(c00, c10, w[1]);
    let c1 = lerp(c01, c11, w[1]);
    lerp(c0, c1, w[2])
}

fn rotate_grid(voxels: &[f64], dims: Dims, angles: [f64; 3]) -> Vec<f64> {
    let r = rotation_matrix(angles);
    let ctr = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let mut out = vec![0.0; voxels.len()];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let o = [x as f64 - ctr[0], y as f64 - ctr[1], z as f64 - ctr[2]];
                // inverse map: source = R^T o
                let mut src = [0.0; 3];
                for a in 0..3 {
                    src[a] = r[0][a] * o[0] + r[1][a] * o[1] + r[2][a] * o[2] + ctr[a];
                }
                out[offset(dims, x, y, z)] = sample_trilinear(voxels, dims, src);
            }
        }
    }
    out
}

/// Rotate about the volume center. The valid extent is kept as is.
pub fn apply_rotation(v: &Volume, angles: [f64; 3]) -> Volume {
    if angles == [0.0; 3] {
        return v.clone();
    }
    Volume {
        dims: v.dims,
        voxels: rotate_grid(&v.voxels, v.dims, angles),
        modality: v.modality.clone(),
        valid_extent: v.valid_extent,
    }
}

pub fn sample_rotation(rng: &mut Stream, bound: f64) -> [f64; 3] {
    if bound == 0.0 {
        return [0.0; 3];
    }
    [
        rng.uniform_range(-bound, bound),
        rng.uniform_range(-bound, bound),
        rng.uniform_range(-bound, bound),
    ]
}

pub fn rand_affine(v: &Volume, rng: &mut Stream, bound: f64) -> (Volume, [f64; 3]) {
    let angles = sample_rotation(rng, bound);
    (apply_rotation(v, angles), angles)
}

/// Z-score over strictly nonzero voxels (population sigma); zeros stay zero.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let nz: Vec<f64> = v.voxels.iter().copied().filter(|x| *x != 0.0).collect();
    if nz.len() < 2 {
        return v.clone();
    }
    let n = nz.len() as f64;
    let mean = nz.iter().sum::<f64>() / n;
    let var = nz.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return v.clone();
    }
    let mut out = v.clone();
    for x in out.voxels.iter_mut().filter(|x| **x != 0.0) {
        *x = (*x - mean) / sd;
    }
    out
}

pub const SANITIZE_BOUND: f64 = 4.0;

pub fn sanitize(v: &Volume) -> Volume {
    let mut out = v.clone();
    for x in out.voxels.iter_mut() {
        *x = if x.is_finite() {
            x.clamp(-SANITIZE_BOUND, SANITIZE_BOUND)
        } else {
            0.0
        };
    }
    out
}

fn label_volume(label: &RawVolume, cfg: &PreprocessConfig, flip: [bool; 3], angles: [f64; 3]) -> Volume {
    let v = divisible_pad(&crop_or_pad(label, cfg.target_shape), cfg.patch_size);
    let v = apply_flip(&v, flip);
    let mut v = apply_rotation(&v, angles);
    for x in v.voxels.iter_mut() {
        *x = if *x >= 0.5 { 1.0 } else { 0.0 };
    }
    v
}

/// Run the full pipeline on every modality of a session.
pub fn preprocess_session(s: &Session, cfg: &PreprocessConfig) -> Result<PreparedSession> {
    cfg.validate()?;
    if s.volumes.is_empty() {
        return Err(Error::Config(format!("session '{}' has no modalities", s.case_id)));
    }
    let case = rng::stable_hash(&s.case_id);
    let mut log = Vec::new();

    let flip = sample_flip(&mut Stream::derived(cfg.seed, &[case, rng::tag::FLIP]), cfg.flip_p);
    let angles = sample_rotation(&mut Stream::derived(cfg.seed, &[case, rng::tag::AFFINE]), cfg.rotation_bound);
    log.push(AppliedOp {
        op: "rand_flip".into(),
        modality: None,
        params: serde_json::json!({ "axes": flip }),
    });
    log.push(AppliedOp {
        op: "rand_affine".into(),
        modality: None,
        params: serde_json::json!({ "angles": angles }),
    });

    let mut volumes = BTreeMap::new();
    let mut spacing = [1.0; 3];
    for (name, raw) in &s.volumes {
        spacing = raw.spacing;
        let m = rng::stable_hash(name);
        let stream = |tag: u64| Stream::derived(cfg.seed, &[case, tag, m]);
        let v = crop_or_pad(raw, cfg.target_shape);
        let v = divisible_pad(&v, cfg.patch_size);

        let coeffs = sample_bias_field(&mut stream(rng::tag::BIAS_FIELD), cfg.bias_field_p, cfg.bias_field_coeff);
        let v = match &coeffs {
            Some(c) => apply_bias_field(&v, c),
            None => v,
        };
        let (v, noised) = rand_gaussian_noise(&v, &mut stream(rng::tag::NOISE), cfg.noise_p, cfg.noise_mean, cfg.noise_std);
        let (v, gamma) = rand_adjust_contrast(&v, &mut stream(rng::tag::CONTRAST), cfg.contrast_p, cfg.gamma_range);
        let v = apply_flip(&v, flip);
        let v = apply_rotation(&v, angles);
        let v = sanitize(&normalize_intensity(&v));

        log.push(AppliedOp {
            op: "rand_bias_field".into(),
            modality: Some(name.clone()),
            params: serde_json::json!({ "coefficients": coeffs }),
        });
        log.push(AppliedOp {
            op: "rand_gaussian_noise".into(),
            modality: Some(name.clone()),
            params: serde_json::json!({ "applied": noised }),
        });
        log.push(AppliedOp {
            op: "rand_adjust_contrast".into(),
            modality: Some(name.clone()),
            params: serde_json::json!({ "gamma": gamma }),
        });
        volumes.insert(name.clone(), v);
    }

    let label = s.label.as_ref().map(|l| label_volume(l, cfg, flip, angles));
    Ok(PreparedSession {
        case_id: s.case_id.clone(),
        volumes,
        label,
        spacing,
        applied_ops: log,
    })
}
