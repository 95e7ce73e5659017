//! Synthetic head phantoms: an ellipsoidal head with smooth blob "anatomy",
//! per-modality contrast, and an optional spherical lesion.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{nifti, scan_corpus, CaseManifest, Session, LABEL_KEY};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::volume::{offset, voxel_count, Dims, RawVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub modalities: Vec<String>,
    pub dims: Dims,
    pub lesion: bool,
    pub lesion_radius: usize,
    /// Lesion center; a random interior point when absent.
    pub lesion_center: Option<[usize; 3]>,
}

impl SynthSpec {
    pub fn new(modalities: &[&str], dims: Dims, lesion: bool) -> Self {
        Self {
            modalities: modalities.iter().map(|s| s.to_string()).collect(),
            dims,
            lesion,
            lesion_radius: 4,
            lesion_center: None,
        }
    }
}

const BLOBS: usize = 6;

/// Contrast of one modality: `scale * tissue^gamma + offset`, lesions at `lesion * mean`.
/// Depends only on the modality name so a modality looks alike across cases.
struct Contrast {
    scale: f64,
    gamma: f64,
    offset: f64,
    lesion: f64,
    invert: bool,
}

impl Contrast {
    fn of(modality: &str) -> Self {
        let mut s = Stream::derived(rng::stable_hash(modality), &[rng::tag::SYNTH]);
        Self {
            scale: s.uniform_range(50.0, 400.0),
            gamma: s.uniform_range(0.7, 1.6),
            offset: s.uniform_range(10.0, 60.0),
            lesion: s.uniform_range(1.6, 2.4),
            invert: s.bernoulli(0.5),
        }
    }
}

pub fn in_ball(c: [usize; 3], r: usize, x: usize, y: usize, z: usize) -> bool {
    let d = |a: usize, b: usize| (a as i64 - b as i64).pow(2);
    d(x, c[0]) + d(y, c[1]) + d(z, c[2]) <= (r * r) as i64
}

/// One synthetic session. Geometry is shared by all modalities; the label
/// volume is present exactly when `spec.lesion` is set.
pub fn synth_session(seed: u64, case_id: &str, spec: &SynthSpec) -> Result<Session> {
    let dims = spec.dims;
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::Range(format!("synthetic dims must be at least 16 per axis, got {dims:?}")));
    }
    let mut s = Stream::derived(seed, &[rng::tag::SYNTH]);
    let n = voxel_count(dims);
    let center: Vec<f64> = dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let semi: Vec<f64> = dims.iter().map(|&d| d as f64 * s.uniform_range(0.38, 0.46)).collect();

    struct Blob {
        c: [f64; 3],
        inv_two_sigma2: f64,
        amp: f64,
    }
    let blobs: Vec<Blob> = (0..BLOBS)
        .map(|_| {
            let mut c = [0.0; 3];
            for a in 0..3 {
                c[a] = center[a] + semi[a] * s.uniform_range(-0.6, 0.6);
            }
            let sigma = dims[0].min(dims[1]).min(dims[2]) as f64 * s.uniform_range(0.08, 0.2);
            Blob {
                c,
                inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                amp: s.uniform_range(-0.5, 0.8),
            }
        })
        .collect();

    let lesion_center = if spec.lesion {
        Some(spec.lesion_center.unwrap_or_else(|| {
            let mut c = [0; 3];
            for a in 0..3 {
                let span = (semi[a] * 0.4).max(1.0);
                c[a] = (center[a] + s.uniform_range(-span, span)).round() as usize;
            }
            c
        }))
    } else {
        None
    };

    // tissue in [0.2, ~2], zero outside the head
    let mut tissue = vec![0.0; n];
    let mut lesion = vec![false; n];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = [x as f64, y as f64, z as f64];
                let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum();
                if r2 > 1.0 {
                    continue;
                }
                let mut t = 1.0 - 0.3 * r2;
                for b in &blobs {
                    let d2: f64 = (0..3).map(|a| (p[a] - b.c[a]).powi(2)).sum();
                    t += b.amp * (-d2 * b.inv_two_sigma2).exp();
                }
                let i = offset(dims, x, y, z);
                tissue[i] = t.max(0.2);
                if let Some(c) = lesion_center {
                    lesion[i] = in_ball(c, spec.lesion_radius, x, y, z);
                }
            }
        }
    }

    let mut volumes = BTreeMap::new();
    for m in &spec.modalities {
        let name = crate::modality::normalize_modality_name(m)?;
        let k = Contrast::of(&name);
        let mut vox = vec![0.0; n];
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for i in 0..n {
            if tissue[i] > 0.0 {
                let t = if k.invert { 2.2 - tissue[i].min(2.0) } else { tissue[i] };
                vox[i] = k.scale * t.powf(k.gamma) + k.offset;
                sum += vox[i];
                cnt += 1;
            }
        }
        let mean = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
        for i in 0..n {
            if lesion[i] && tissue[i] > 0.0 {
                vox[i] = k.lesion * mean;
            }
        }
        volumes.insert(name.clone(), RawVolume::new(dims, [1.0; 3], vox, name)?);
    }

    let label = if spec.lesion {
        let vox = lesion.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Some(RawVolume::new(dims, [1.0; 3], vox, LABEL_KEY)?)
    } else {
        None
    };

    Ok(Session {
        case_id: case_id.to_string(),
        volumes,
        label,
    })
}

/// Case `i` of a synthetic corpus; even cases carry a lesion.
pub fn synth_case(seed: u64, i: usize, modalities: &[String], dims: Dims, lesion_radius: usize) -> Result<Session> {
    let spec = SynthSpec {
        modalities: modalities.to_vec(),
        dims,
        lesion: i % 2 == 0,
        lesion_radius,
        lesion_center: None,
    };
    synth_session(rng::derive(seed, &[rng::tag::SYNTH, i as u64]), &format!("case_{i:03}"), &spec)
}

/// Write `n` synthetic cases as NIfTI files under `root/case_XXX/` and return
/// the scanned manifest.
pub fn write_synth_corpus(root: &Path, n: usize, seed: u64, modalities: &[String], dims: Dims, lesion_radius: usize) -> Result<CaseManifest> {
    for i in 0..n {
        let s = synth_case(seed, i, modalities, dims, lesion_radius)?;
        let dir = root.join(&s.case_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (m, v) in &s.volumes {
            nifti::write_volume(v, dir.join(format!("{m}.nii")))?;
        }
        if let Some(l) = &s.label {
            nifti::write_volume(l, dir.join(format!("{LABEL_KEY}.nii")))?;
        }
    }
    scan_corpus(root)
}
