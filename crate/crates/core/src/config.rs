//! Flat run configuration shared by every workflow.
//!
//! Every field has a default, so a config file only lists what it changes.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{self, EmbeddingSource};
use crate::network::NetConfig;
use crate::objectives::Warmup;
use crate::preprocess::PreprocessConfig;
use crate::tokenizer::TokenizerConfig;
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Segmentation,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStopMetric {
    /// Dice for segmentation, accuracy for classification.
    Auto,
    Dice,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // optimization
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps in total (the schedule still spans `epochs`).
    pub max_steps: Option<usize>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub grad_clip: f64,

    // masking and objective
    pub mask_ratio: f64,
    pub p_drop: f64,
    pub min_nonzero_fraction: f64,
    pub lambda_var_max: f64,
    pub lambda_cov_max: f64,
    pub warm_epochs: f64,
    /// Preprocess each session once and reuse it every step.
    pub cache_sessions: bool,

    // network
    pub d_enc: usize,
    pub d_dec: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: Dims,
    pub modality_dim: usize,
    pub max_grid: Dims,
    pub n_classes: usize,
    pub n_labels: usize,
    pub embedding_table: Option<PathBuf>,
    pub embedding_fallback: bool,

    // preprocessing
    pub target_shape: Dims,
    pub bias_field_p: f64,
    pub bias_field_coeff: (f64, f64),
    pub noise_p: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub contrast_p: f64,
    pub gamma_range: (f64, f64),
    pub flip_p: f64,
    pub rotation_bound: f64,

    // finetuning
    pub task: Task,
    pub freeze_encoder: bool,
    pub patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub val_fraction: f64,

    // synthetic data
    pub synth_cases: usize,
    pub synth_dims: Dims,
    pub synth_modalities: Vec<String>,
    pub synth_lesion_radius: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let pre = PreprocessConfig::default();
        Self {
            seed: 0,
            batch_size: 2,
            epochs: 10,
            max_steps: None,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_fraction: 0.05,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            grad_clip: 1.0,
            mask_ratio: 0.75,
            p_drop: 0.2,
            min_nonzero_fraction: 0.0,
            lambda_var_max: 0.1,
            lambda_cov_max: 0.005,
            warm_epochs: 5.0,
            cache_sessions: false,
            d_enc: net.d_enc,
            d_dec: net.d_dec,
            layers_enc: net.layers_enc,
            layers_dec: net.layers_dec,
            heads: net.heads,
            mlp_ratio: net.mlp_ratio,
            patch_size: pre.patch_size,
            modality_dim: net.modality_dim,
            max_grid: net.max_grid,
            n_classes: net.n_classes,
            n_labels: net.n_labels,
            embedding_table: None,
            embedding_fallback: true,
            target_shape: pre.target_shape,
            bias_field_p: pre.bias_field_p,
            bias_field_coeff: pre.bias_field_coeff,
            noise_p: pre.noise_p,
            noise_mean: pre.noise_mean,
            noise_std: pre.noise_std,
            contrast_p: pre.contrast_p,
            gamma_range: pre.gamma_range,
            flip_p: pre.flip_p,
            rotation_bound: pre.rotation_bound,
            task: Task::Segmentation,
            freeze_encoder: false,
            patience: 3,
            early_stop_metric: EarlyStopMetric::Auto,
            val_fraction: 0.25,
            synth_cases: 8,
            synth_dims: [32, 32, 32],
            synth_modalities: vec!["t1".into(), "t1c".into(), "t2".into(), "flair".into()],
            synth_lesion_radius: 4,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The same run with run-control fields cleared, so that a resumed run and
    /// a straight run record identical metadata.
    pub fn identity(&self) -> Self {
        Self {
            max_steps: None,
            ..self.clone()
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            d_enc: self.d_enc,
            d_dec: self.d_dec,
            layers_enc: self.layers_enc,
            layers_dec: self.layers_dec,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
            modality_dim: self.modality_dim,
            max_grid: self.max_grid,
            n_classes: self.n_classes,
            n_labels: self.n_labels,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            target_shape: self.target_shape,
            patch_size: self.patch_size,
            bias_field_p: self.bias_field_p,
            bias_field_coeff: self.bias_field_coeff,
            noise_p: self.noise_p,
            noise_mean: self.noise_mean,
            noise_std: self.noise_std,
            contrast_p: self.contrast_p,
            gamma_range: self.gamma_range,
            flip_p: self.flip_p,
            rotation_bound: self.rotation_bound,
            seed: self.seed,
        }
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            patch_size: self.patch_size,
            mask_ratio: self.mask_ratio,
            p_drop: self.p_drop,
            min_nonzero_fraction: self.min_nonzero_fraction,
        }
    }

    pub fn warmup(&self) -> Warmup {
        Warmup {
            lambda_var_max: self.lambda_var_max,
            lambda_cov_max: self.lambda_cov_max,
            warm_epochs: self.warm_epochs,
        }
    }

    pub fn embedding_source(&self) -> Result<EmbeddingSource> {
        match &self.embedding_table {
            None => Ok(EmbeddingSource::hash_seeded(self.modality_dim)),
            Some(p) => {
                let table = modality::load_embedding_table(p)?;
                EmbeddingSource::from_table(table, self.modality_dim, self.embedding_fallback)
            }
        }
    }

    pub fn early_stop_metric(&self) -> EarlyStopMetric {
        match (self.early_stop_metric, self.task) {
            (EarlyStopMetric::Auto, Task::Segmentation) => EarlyStopMetric::Dice,
            (EarlyStopMetric::Auto, Task::Classification) => EarlyStopMetric::Accuracy,
            (m, _) => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 (variance terms need two sessions), got {}", self.batch_size));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("need 0 < lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must be in [0,1), got {}", self.warmup_fraction));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0,1)".into());
        }
        if self.eps_opt <= 0.0 || self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return bad("eps_opt and grad_clip must be positive, weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..=1.0).contains(&self.p_drop) {
            return bad("mask_ratio and p_drop must be in [0,1]".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0,1), got {}", self.val_fraction));
        }
        if self.synth_dims.iter().any(|&d| d < 16) {
            return bad(format!("synth_dims must be at least 16 per axis, got {:?}", self.synth_dims));
        }
        self.net_config().validate()?;
        self.preprocess_config().validate()?;
        for a in 0..3 {
            if self.target_shape[a] % self.patch_size[a] != 0 {
                return bad(format!(
                    "target_shape {:?} must be divisible by patch_size {:?}",
                    self.target_shape, self.patch_size
                ));
            }
            if self.target_shape[a] / self.patch_size[a] > self.max_grid[a] {
                return bad(format!(
                    "target_shape {:?} / patch_size {:?} exceeds max_grid {:?}",
                    self.target_shape, self.patch_size, self.max_grid
                ));
            }
        }
        Ok(())
    }
}
