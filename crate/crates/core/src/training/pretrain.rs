use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::Session;
use crate::error::{Error, Result};
use crate::modality::ModalityEmbedder;
use crate::network::{is_head, ModelParams};
use crate::objectives::{pretrain_loss_and_grads, warmup_lambdas};
use crate::preprocess::{preprocess_session, PreparedSession};
use crate::rng::{self, Stream};
use crate::tokenizer::assemble_batch;
use crate::training::checkpoint::{append_line, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::training::optim::{adamw_step, clip_global_norm, lr_schedule, AdamW, OptimState};

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_mae: f64,
    pub l_var: f64,
    pub l_cov: f64,
    pub l_total: f64,
    pub lambda_var: f64,
    pub lambda_cov: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.bfmc";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.bfmc")
}

pub fn steps_per_epoch(n_sessions: usize, batch_size: usize) -> usize {
    n_sessions.div_ceil(batch_size).max(1)
}

/// Session order for one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    Stream::derived(seed, &[rng::tag::SHUFFLE, epoch]).choose(n, n)
}

/// Session indices of batch `slot` within an epoch. Batches wrap around the
/// permutation, so every batch is full even when the corpus is small.
pub fn batch_indices(perm: &[usize], slot: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|j| perm[(slot * batch_size + j) % perm.len()]).collect()
}

pub(crate) fn initial_meta(cfg: &RunConfig) -> CheckpointMeta {
    CheckpointMeta {
        step: 0,
        epoch: 0,
        optim_t: 0,
        task: None,
        net: cfg.net_config(),
        run_config: cfg.identity(),
        rng_seed: cfg.seed,
    }
}

pub(crate) fn prepare_all(sessions: &[Session], cfg: &RunConfig) -> Result<Vec<PreparedSession>> {
    let pre = cfg.preprocess_config();
    sessions.par_iter().map(|s| preprocess_session(s, &pre)).collect()
}

/// Masked-autoencoder pretraining.
///
/// Each step draws a batch from the epoch permutation, augments it with
/// per-slot streams (or reuses cached preprocessing), masks it with a
/// per-step stream, and takes one clipped AdamW step. The run writes a
/// metrics line per step, a checkpoint per epoch, and a final checkpoint.
/// Every random draw is keyed by (seed, step), so a resumed run continues
/// exactly where the straight run would be.
pub fn pretrain(cfg: &RunConfig, sessions: &[Session], out_dir: Option<&Path>, resume: Option<Checkpoint>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let net = cfg.net_config();
    let embedder = ModalityEmbedder::new(cfg.embedding_source()?);
    let tok = cfg.tokenizer_config();
    let warm = cfg.warmup();
    let spe = steps_per_epoch(sessions.len(), cfg.batch_size);
    let total = cfg.epochs * spe;
    let stop = cfg.max_steps.map_or(total, |m| m.min(total));

    let (mut params, mut optim, mut meta) = match resume {
        Some(c) => {
            if c.meta.run_config != cfg.identity() {
                return Err(Error::Config("resume checkpoint was written with a different configuration".into()));
            }
            c.params.check_compatible(&net)?;
            let optim = c.optim.unwrap_or_else(|| OptimState::new(&c.params));
            (c.params, optim, c.meta)
        }
        None => {
            let p = ModelParams::init(&net, cfg.seed);
            let o = OptimState::new(&p);
            (p, o, initial_meta(cfg))
        }
    };

    let metrics_path: Option<PathBuf> = out_dir.map(|d| d.join(METRICS_FILE));
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        if meta.step == 0 {
            let p = metrics_path.as_ref().expect("set with out_dir");
            std::fs::write(p, b"").map_err(|e| Error::io(p, e))?;
        }
    }

    let cached = if cfg.cache_sessions { Some(prepare_all(sessions, cfg)?) } else { None };
    let base_pre = cfg.preprocess_config();
    let hp = AdamW {
        lr: 0.0,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps_opt,
        weight_decay: cfg.weight_decay,
    };

    let mut metrics = Vec::new();
    let mut perm_epoch = u64::MAX;
    let mut perm = Vec::new();
    for t in (meta.step as usize + 1)..=stop {
        let epoch = ((t - 1) / spe) as u64;
        let slot = (t - 1) % spe;
        if epoch != perm_epoch {
            perm = epoch_permutation(cfg.seed, epoch, sessions.len());
            perm_epoch = epoch;
        }
        let idx = batch_indices(&perm, slot, cfg.batch_size);
        let prepared: Vec<PreparedSession> = match &cached {
            Some(c) => idx.iter().map(|&i| c[i].clone()).collect(),
            None => idx
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut pre = base_pre.clone();
                    pre.seed = rng::derive(cfg.seed, &[rng::tag::AUGMENT, t as u64, j as u64]);
                    preprocess_session(&sessions[i], &pre)
                })
                .collect::<Result<_>>()?,
        };
        let batch = assemble_batch(&prepared, &tok, &embedder, rng::derive(cfg.seed, &[rng::tag::MASK, t as u64]))?;
        let (lambda_var, lambda_cov) = warmup_lambdas(t as i64, spe, &warm)?;
        let lr = lr_schedule(t, total, cfg.warmup_fraction, cfg.lr_max, cfg.lr_min)?;
        let (report, mut grads) = pretrain_loss_and_grads(&params, &net, &batch, lambda_var, lambda_cov)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteGradient(format!("global norm at step {t}")));
        }
        if grad_norm > cfg.grad_clip {
            log::debug!("step {t}: gradient norm {grad_norm:.4} clipped to {}", cfg.grad_clip);
        }
        adamw_step(&mut params, &grads, &mut optim, &AdamW { lr, ..hp }, |n| !is_head(n))?;

        let m = StepMetrics {
            step: t as u64,
            epoch,
            lr,
            l_mae: report.l_mae,
            l_var: report.l_var,
            l_cov: report.l_cov,
            l_total: report.l_total,
            lambda_var,
            lambda_cov,
            grad_norm,
        };
        if let Some(p) = &metrics_path {
            append_line(p, &serde_json::to_string(&m).expect("metrics serialize"))?;
        }
        metrics.push(m);
        meta.step = t as u64;
        meta.epoch = if t % spe == 0 { epoch + 1 } else { epoch };
        meta.optim_t = optim.t;

        if t % spe == 0 {
            if let Some(d) = out_dir {
                let c = Checkpoint {
                    meta: meta.clone(),
                    params: params.clone(),
                    optim: Some(optim.clone()),
                };
                save_checkpoint(&c, d.join(epoch_checkpoint_name(epoch + 1)))?;
            }
        }
    }

    let checkpoint = Checkpoint {
        meta,
        params,
        optim: Some(optim),
    };
    if let Some(d) = out_dir {
        save_checkpoint(&checkpoint, d.join(FINAL_CHECKPOINT))?;
    }
    Ok(PretrainOutcome { checkpoint, metrics })
}

/// Parse a metrics log.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("metrics line: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::synth::{synth_session, SynthSpec};

    pub(crate) fn tiny_cfg() -> RunConfig {
        RunConfig {
            seed: 3,
            batch_size: 2,
            epochs: 5,
            d_enc: 16,
            d_dec: 8,
            layers_enc: 1,
            layers_dec: 1,
            heads: 2,
            mlp_ratio: 2,
            modality_dim: 8,
            patch_size: [4; 3],
            max_grid: [4; 3],
            target_shape: [16; 3],
            ..RunConfig::default()
        }
    }

    fn data(n: usize) -> Vec<Session> {
        (0..n)
            .map(|i| synth_session(i as u64, &format!("c{i}"), &SynthSpec::new(&["t1", "flair"], [16; 3], i % 2 == 0)).unwrap())
            .collect()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = RunConfig { epochs: 0, ..tiny_cfg() };
        let out = pretrain(&cfg, &data(2), None, None).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.checkpoint.params, ModelParams::init(&cfg.net_config(), cfg.seed));
        assert_eq!(out.checkpoint.meta.step, 0);
    }

    #[test]
    fn batching_helpers() {
        assert_eq!(steps_per_epoch(5, 2), 3);
        assert_eq!(steps_per_epoch(1, 2), 1);
        let perm = epoch_permutation(1, 0, 5);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(batch_indices(&perm, 2, 2), vec![perm[4], perm[0]]);
        assert_eq!(batch_indices(&[0], 0, 2), vec![0, 0]);
    }

    #[test]
    fn determinism_and_files() {
        let cfg = RunConfig { max_steps: Some(4), ..tiny_cfg() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = pretrain(&cfg, &data(3), Some(d1.path()), None).unwrap();
        let b = pretrain(&cfg, &data(3), Some(d2.path()), None).unwrap();
        assert_eq!(a.metrics.len(), 4);
        assert_eq!(a.metrics, b.metrics);
        let f1 = std::fs::read(d1.path().join(METRICS_FILE)).unwrap();
        assert_eq!(f1, std::fs::read(d2.path().join(METRICS_FILE)).unwrap());
        assert_eq!(read_metrics(d1.path().join(METRICS_FILE)).unwrap(), a.metrics);
        assert!(d1.path().join(epoch_checkpoint_name(1)).exists());
        assert!(d1.path().join(epoch_checkpoint_name(2)).exists());
        assert_eq!(
            std::fs::read(d1.path().join(FINAL_CHECKPOINT)).unwrap(),
            std::fs::read(d2.path().join(FINAL_CHECKPOINT)).unwrap()
        );
        // heads are not part of pretraining
        assert!(a.checkpoint.params.tensors["head.cls.weight"].data.iter().all(|x| *x == 0.0));
    }
}
