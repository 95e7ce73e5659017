use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{EarlyStopMetric, RunConfig, Task};
use crate::corpus::{write_atomic, Session};
use crate::error::{Error, Result};
use crate::evaluation::{self, all_visible_tokens, case_class};
use crate::modality::ModalityEmbedder;
use crate::network::{self, Bound, ModelParams};
use crate::preprocess::{preprocess_session, PreparedSession, PreprocessConfig};
use crate::tensor::{Matrix, Tensor};
use crate::tokenizer::SessionTokens;
use crate::training::checkpoint::{save_checkpoint, Checkpoint};
use crate::training::optim::{adamw_step, clip_global_norm, lr_schedule, AdamW, OptimState};
use crate::training::pretrain::{batch_indices, epoch_permutation, steps_per_epoch};

pub const FINETUNED_CHECKPOINT: &str = "finetuned.bfmc";
pub const HISTORY_FILE: &str = "finetune_history.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: u64,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Weights from the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: u64,
    pub stopped_early: bool,
}

/// The last `ceil(fraction * n)` sessions form the validation split (at least
/// one session stays in training).
pub fn split_train_val(sessions: &[Session], fraction: f64) -> (Vec<Session>, Vec<Session>) {
    let n = sessions.len();
    let n_val = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let (a, b) = sessions.split_at(n - n_val);
    (a.to_vec(), b.to_vec())
}

pub fn head_prefix(task: Task) -> &'static str {
    match task {
        Task::Segmentation => "head.seg.",
        Task::Classification => "head.cls.",
    }
}

struct Example {
    tokens: SessionTokens,
    prepared: PreparedSession,
    class: usize,
    /// `grid_len x patch_len` binary target for segmentation.
    seg_target: Matrix,
}

fn build_examples(sessions: &[Session], pre: &PreprocessConfig, cfg: &RunConfig, embedder: &ModalityEmbedder) -> Result<Vec<Example>> {
    let net = cfg.net_config();
    sessions
        .par_iter()
        .map(|s| {
            let prepared = preprocess_session(s, pre)?;
            let tokens = all_visible_tokens(&prepared, &net, embedder)?;
            let label = match &prepared.label {
                Some(l) => l.voxels.iter().map(|v| if *v >= 0.5 { 1.0 } else { 0.0 }).collect(),
                None => vec![0.0; prepared.dims().iter().product()],
            };
            let seg_target = network::volume_to_patches(&label, tokens.patches.grid, tokens.patches.patch);
            Ok(Example {
                class: case_class(&prepared),
                tokens,
                prepared,
                seg_target,
            })
        })
        .collect()
}

fn task_loss(g: &mut Graph, b: &Bound, cfg: &RunConfig, task: Task, batch: &[&Example]) -> Result<crate::autodiff::NodeId> {
    let net = cfg.net_config();
    match task {
        Task::Classification => {
            let logits = batch
                .iter()
                .map(|e| network::classify_session(g, b, &net, &e.tokens))
                .collect::<Result<Vec<_>>>()?;
            let all = g.concat_rows(logits);
            Ok(g.cross_entropy(all, batch.iter().map(|e| e.class).collect()))
        }
        Task::Segmentation => {
            let w = 1.0 / batch.len() as f64;
            let terms = batch
                .iter()
                .map(|e| {
                    let logits = network::segment_session(g, b, &net, &e.tokens)?;
                    Ok((g.seg_loss(logits, e.seg_target.clone()), w))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(g.lin_comb(terms))
        }
    }
}

fn metric(params: &ModelParams, cfg: &RunConfig, embedder: &ModalityEmbedder, metric: EarlyStopMetric, examples: &[Example]) -> Result<f64> {
    let net = cfg.net_config();
    let scores = examples
        .par_iter()
        .map(|e| match metric {
            EarlyStopMetric::Accuracy => {
                let logits = evaluation::classify_logits(params, &net, embedder, &e.prepared)?;
                Ok((evaluation::argmax(&logits) == e.class) as usize as f64)
            }
            _ => {
                let pred = evaluation::segment(params, &net, embedder, &e.prepared)?;
                evaluation::dice(&pred, &evaluation::reference_mask(&e.prepared)?)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Supervised adaptation of a pretrained encoder.
///
/// The decoder never enters the graph and all patches are visible. Only the
/// task head is trained when `freeze_encoder` is set; otherwise the encoder
/// and the task head are. Training stops once the validation metric has not
/// improved for `patience` epochs, and the best epoch's weights are returned.
pub fn finetune(cfg: &RunConfig, init: &Checkpoint, train: &[Session], val: &[Session], out_dir: Option<&Path>) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let task = cfg.task;
    let net = cfg.net_config();
    init.params.check_compatible(&net)?;
    if task == Task::Segmentation && net.n_labels != 1 {
        return Err(Error::Config("segmentation finetuning supports a single label channel".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let embedder = ModalityEmbedder::new(cfg.embedding_source()?);
    let pre = PreprocessConfig::deterministic(cfg.target_shape, cfg.patch_size);
    let train_ex = build_examples(train, &pre, cfg, &embedder)?;
    let val_ex = if val.is_empty() { None } else { Some(build_examples(val, &pre, cfg, &embedder)?) };
    let es_metric = cfg.early_stop_metric();

    let prefix = head_prefix(task);
    let freeze = cfg.freeze_encoder;
    let trainable = move |n: &str| {
        if network::is_head(n) {
            n.starts_with(prefix)
        } else {
            !freeze && !network::is_decoder(n)
        }
    };

    let mut params = init.params.clone();
    let mut optim = OptimState::new(&params);
    let spe = steps_per_epoch(train_ex.len(), cfg.batch_size);
    let total = cfg.epochs * spe;
    let stop = cfg.max_steps.map_or(total, |m| m.min(total));
    let hp = AdamW {
        lr: 0.0,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps_opt,
        weight_decay: cfg.weight_decay,
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, u64, ModelParams)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut t = 0usize;
    'epochs: for epoch in 0..cfg.epochs as u64 {
        let perm = epoch_permutation(cfg.seed, epoch, train_ex.len());
        let mut loss_sum = 0.0;
        let mut steps = 0u64;
        for slot in 0..spe {
            if t >= stop {
                break;
            }
            t += 1;
            let batch: Vec<&Example> = batch_indices(&perm, slot, cfg.batch_size).into_iter().map(|i| &train_ex[i]).collect();
            let mut g = Graph::new();
            let b = Bound::new(&mut g, &params);
            let loss = task_loss(&mut g, &b, cfg, task, &batch)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(format!("task loss at step {t}")));
            }
            let grads = g.backward(loss);
            let mut grads: BTreeMap<String, Tensor> =
                b.gradients(&g, &grads, &params).into_iter().filter(|(k, _)| trainable(k)).collect();
            clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = lr_schedule(t, total, cfg.warmup_fraction, cfg.lr_max, cfg.lr_min)?;
            adamw_step(&mut params, &grads, &mut optim, &AdamW { lr, ..hp }, &trainable)?;
            loss_sum += value;
            steps += 1;
        }
        if steps == 0 {
            break;
        }
        let train_metric = metric(&params, cfg, &embedder, es_metric, &train_ex)?;
        let val_metric = match &val_ex {
            Some(v) => metric(&params, cfg, &embedder, es_metric, v)?,
            None => train_metric,
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            steps,
            train_loss: loss_sum / steps as f64,
            train_metric,
            val_metric,
        });
        log::info!("finetune epoch {}: loss {:.5}, train {:.4}, val {:.4}", epoch + 1, loss_sum / steps as f64, train_metric, val_metric);
        match &best {
            Some((b, _, _)) if val_metric <= *b => {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            _ => {
                best = Some((val_metric, epoch + 1, params.clone()));
                since_best = 0;
            }
        }
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params),
    };
    let mut meta = init.meta.clone();
    meta.task = Some(task);
    meta.run_config = cfg.identity();
    meta.net = net;
    meta.step = t as u64;
    meta.epoch = best_epoch;
    meta.optim_t = 0;
    let checkpoint = Checkpoint {
        meta,
        params: best_params,
        optim: None,
    };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        save_checkpoint(&checkpoint, d.join(FINETUNED_CHECKPOINT))?;
        let text = serde_json::to_string_pretty(&history).expect("history serializes");
        write_atomic(&d.join(HISTORY_FILE), text.as_bytes())?;
    }
    Ok(FinetuneOutcome {
        checkpoint,
        history,
        best_epoch,
        stopped_early,
    })
}
