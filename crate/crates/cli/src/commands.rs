use std::path::{Path, PathBuf};

use serde_json::Value;

use modmae::config::{RunConfig, Task};
use modmae::corpus::{load_session, nifti, scan_corpus, write_atomic, CaseManifest, Session};
use modmae::evaluation::{
    availability_matrix_eval, default_availability, impute_modality, imputation_error, metrics_csv, AvailabilityConfig,
    Evaluator,
};
use modmae::modality::ModalityEmbedder;
use modmae::network::ModelParams;
use modmae::objectives::gradcheck_pretrain;
use modmae::preprocess::{preprocess_session, PreprocessConfig};
use modmae::tokenizer::assemble_batch;
use modmae::training::checkpoint::{load_checkpoint, Checkpoint};
use modmae::training::finetune::{finetune, split_train_val};
use modmae::training::pretrain::pretrain;
use modmae::training::synth::{synth_case, write_synth_corpus};

use crate::cli::{Command, DataArgs};
use crate::error::CliError;
use crate::report;

pub const CONFIG_SNAPSHOT: &str = "config.resolved.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

type Result<T> = std::result::Result<T, CliError>;

fn default_out(cmd: &Command) -> PathBuf {
    match cmd {
        Command::BuildDict { .. } => PathBuf::from(MANIFEST_FILE),
        Command::SynthData => PathBuf::from("synth"),
        other => Path::new("runs").join(other.name()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| modmae::Error::Io { path: dir.into(), source: e })?;
    }
    Ok(write_atomic(path, bytes)?)
}

fn snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(CONFIG_SNAPSHOT), cfg.to_json().as_bytes())
}

/// Sessions from a manifest, a scanned directory, or the synthetic generator.
fn load_sessions(data: &DataArgs, cfg: &RunConfig) -> Result<Vec<Session>> {
    let manifest = match (&data.manifest, &data.data) {
        (Some(m), _) => Some(CaseManifest::load(m)?),
        (None, Some(d)) => Some(scan_corpus(d)?),
        (None, None) => None,
    };
    match manifest {
        Some(m) => {
            let ids: Vec<String> = m.case_ids().map(String::from).collect();
            log::info!("loading {} cases", ids.len());
            Ok(ids.iter().map(|id| load_session(&m, id)).collect::<modmae::Result<_>>()?)
        }
        None => {
            log::info!("no corpus given; generating {} synthetic cases", cfg.synth_cases);
            Ok((0..cfg.synth_cases)
                .map(|i| synth_case(cfg.seed, i, &cfg.synth_modalities, cfg.synth_dims, cfg.synth_lesion_radius))
                .collect::<modmae::Result<_>>()?)
        }
    }
}

/// The model-defining part of a run comes from the checkpoint; the caller's
/// config only contributes the seed.
fn model_config(ckpt: &Checkpoint, cfg: &RunConfig) -> RunConfig {
    RunConfig {
        seed: cfg.seed,
        ..ckpt.meta.run_config.clone()
    }
}

fn load_matrix(spec: &str) -> Result<Vec<AvailabilityConfig>> {
    if spec == "default" {
        return Ok(default_availability());
    }
    let text = std::fs::read_to_string(spec).map_err(|e| CliError::Config(format!("matrix {spec}: {e}")))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("matrix {spec}: {e}")))?;
    let rows = v.as_array().ok_or_else(|| CliError::Config(format!("matrix {spec}: expected a JSON array")))?;
    rows.iter()
        .map(|r| {
            let name = r["name"].as_str().ok_or_else(|| CliError::Config("matrix row without a name".into()))?;
            let mods: Vec<&str> = r["available"]
                .as_array()
                .ok_or_else(|| CliError::Config(format!("matrix row '{name}' without an `available` list")))?
                .iter()
                .map(|m| m.as_str().ok_or_else(|| CliError::Config(format!("matrix row '{name}': modality names must be strings"))))
                .collect::<Result<_>>()?;
            AvailabilityConfig::new(name, &mods).map_err(|e| CliError::Config(e.to_string()))
        })
        .collect()
}

pub fn run(cmd: &Command, cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(cmd));
    match cmd {
        Command::BuildDict { root } => {
            let m = scan_corpus(root)?;
            let base = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            std::fs::create_dir_all(base).map_err(|e| modmae::Error::Io { path: base.into(), source: e })?;
            m.save(&out)?;
            snapshot(cfg, base)?;
            println!("{} cases written to {}", m.len(), out.display());
        }
        Command::SynthData => {
            let m = write_synth_corpus(&out, cfg.synth_cases, cfg.seed, &cfg.synth_modalities, cfg.synth_dims, cfg.synth_lesion_radius)?;
            m.save(out.join(MANIFEST_FILE))?;
            snapshot(cfg, &out)?;
            println!("{} synthetic cases written to {}", m.len(), out.display());
        }
        Command::Pretrain { data, resume } => {
            let sessions = load_sessions(data, cfg)?;
            let resume = resume.as_ref().map(load_checkpoint).transpose()?;
            snapshot(cfg, &out)?;
            let o = pretrain(cfg, &sessions, Some(&out), resume)?;
            if let Some(last) = o.metrics.last() {
                println!("step {}: l_total {:.6}, l_mae {:.6}", last.step, last.l_total, last.l_mae);
            }
            println!("checkpoints written to {}", out.display());
        }
        Command::Gradcheck { coords, step, tolerance } => {
            cfg.validate()?;
            let net = cfg.net_config();
            let embedder = ModalityEmbedder::new(cfg.embedding_source()?);
            let pre = PreprocessConfig::deterministic(cfg.target_shape, cfg.patch_size);
            let prepared = (0..cfg.batch_size)
                .map(|i| {
                    let s = synth_case(cfg.seed, i, &cfg.synth_modalities, cfg.synth_dims, cfg.synth_lesion_radius)?;
                    preprocess_session(&s, &pre)
                })
                .collect::<modmae::Result<Vec<_>>>()?;
            let batch = assemble_batch(&prepared, &cfg.tokenizer_config(), &embedder, cfg.seed)?;
            // perturbed so that zero-initialized tensors carry gradient signal
            let params = ModelParams::init(&net, cfg.seed).perturbed(0.1, cfg.seed.wrapping_add(1));
            let lambdas = (cfg.lambda_var_max, cfg.lambda_cov_max);
            let r = gradcheck_pretrain(&params, &net, &batch, lambdas, *coords, cfg.seed, *step, *tolerance)?;
            snapshot(cfg, &out)?;
            let text = serde_json::to_string_pretty(&r).expect("report serializes");
            write_file(&out.join(GRADCHECK_FILE), text.as_bytes())?;
            println!(
                "max relative error {:.3e} over {} coordinates (tolerance {:e}; plain central difference {:.3e})",
                r.max_rel_error,
                r.checks.len(),
                r.tolerance,
                r.max_central_rel_error
            );
            if !r.passed {
                return Err(CliError::Failed(format!("gradient check failed: {:.3e} >= {:e}", r.max_rel_error, r.tolerance)));
            }
        }
        Command::Finetune { data, checkpoint } => {
            let init = load_checkpoint(checkpoint)?;
            let sessions = load_sessions(data, cfg)?;
            let (train, val) = split_train_val(&sessions, cfg.val_fraction);
            snapshot(cfg, &out)?;
            let o = finetune(cfg, &init, &train, &val, Some(&out))?;
            println!(
                "best epoch {} of {}{}; finetuned checkpoint written to {}",
                o.best_epoch,
                o.history.len(),
                if o.stopped_early { " (stopped early)" } else { "" },
                out.display()
            );
        }
        Command::Evaluate { data, checkpoint, matrix } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let task: Task = ckpt
                .meta
                .task
                .ok_or_else(|| CliError::Failed("checkpoint carries no task head; finetune it first".into()))?;
            let mcfg = model_config(&ckpt, cfg);
            let sessions = load_sessions(data, cfg)?;
            let embedder = ModalityEmbedder::new(mcfg.embedding_source()?);
            let ev = Evaluator::new(&ckpt.params, &ckpt.meta.net, &embedder, mcfg.target_shape);
            let rows = match matrix {
                Some(spec) => availability_matrix_eval(&ev, ckpt.meta.task, task, &sessions, &load_matrix(spec)?)?,
                None => vec![ev.evaluate("all", task, &sessions, 0)?],
            };
            let csv = metrics_csv(&rows);
            snapshot(cfg, &out)?;
            write_file(&out.join(METRICS_CSV), csv.as_bytes())?;
            print!("{csv}");
        }
        Command::Impute {
            data,
            checkpoint,
            case_id,
            target,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let mcfg = model_config(&ckpt, cfg);
            let sessions = load_sessions(data, cfg)?;
            let s = sessions
                .iter()
                .find(|s| &s.case_id == case_id)
                .ok_or_else(|| modmae::Error::NotFound(format!("case '{case_id}'")))?;
            let embedder = ModalityEmbedder::new(mcfg.embedding_source()?);
            let prepared = preprocess_session(s, &PreprocessConfig::deterministic(mcfg.target_shape, mcfg.patch_size))?;
            let name = modmae::modality::normalize_modality_name(target)?;
            let mut sources = prepared.clone();
            sources.volumes.remove(&name);
            let imputed = impute_modality(&ckpt.params, &ckpt.meta.net, &embedder, &sources, &name)?;
            let path = out.join(case_id.replace(['/', '\\'], "_")).join(format!("{name}.nii"));
            write_file(&path, &nifti::encode(&imputed.to_raw(prepared.spacing))?)?;
            snapshot(cfg, &out)?;
            println!("imputed {name} written to {}", path.display());
            if let Some(truth) = prepared.volumes.get(&name) {
                println!("mean squared error against the acquired volume: {:.6}", imputation_error(&imputed, truth)?);
            }
        }
        Command::Report { metrics } => {
            let summary = report::render(metrics, &out)?;
            snapshot(cfg, &out)?;
            print!("{summary}");
        }
    }
    Ok(())
}
