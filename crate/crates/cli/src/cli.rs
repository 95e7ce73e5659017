//! Argument parsing. Every run-config key is also a global `--flag` whose
//! value overrides the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{Map, Value};

use modmae::config::RunConfig;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "modmae", version, about = "Modality-agnostic masked autoencoder pretraining for brain MRI")]
#[command(propagate_version = true, arg_required_else_help = true)]
pub struct Cli {
    /// JSON run configuration; flags win over its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output location (a directory, or a file for build-dict).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Worker threads; 1 gives fully sequential execution.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Debug-level logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    /// Only warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Case manifest written by build-dict or synth-data.
    #[arg(long, value_name = "FILE", conflicts_with = "data")]
    pub manifest: Option<PathBuf>,

    /// Corpus directory to scan (one case per directory of .nii files).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a corpus directory and write the case manifest.
    BuildDict {
        #[arg(long, value_name = "DIR")]
        root: PathBuf,
    },
    /// Write a synthetic NIfTI corpus and its manifest.
    SynthData,
    /// Masked-autoencoder pretraining.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Continue from a pretraining checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the pretraining loss.
    Gradcheck {
        /// Number of parameter coordinates to check.
        #[arg(long, default_value_t = 100)]
        coords: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Adapt a pretrained encoder to segmentation or classification.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Score a finetuned model, optionally across modality-availability configurations.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// `default` for the six standard configurations, or a JSON file of
        /// `{"name": ..., "available": [...]}` objects.
        #[arg(long, value_name = "SPEC")]
        matrix: Option<String>,
    },
    /// Reconstruct a modality of one case from its other modalities.
    Impute {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long = "case", value_name = "ID")]
        case_id: String,
        /// Modality to reconstruct; it need not exist in the case.
        #[arg(long, value_name = "NAME")]
        target: String,
    },
    /// Render a metrics log into loss curves and a summary table.
    Report {
        #[arg(long, value_name = "FILE")]
        metrics: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildDict { .. } => "build-dict",
            Command::SynthData => "synth-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Impute { .. } => "impute",
            Command::Report { .. } => "report",
        }
    }
}

fn default_config_object() -> Map<String, Value> {
    match serde_json::to_value(RunConfig::default()).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("run config is a struct"),
    }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// The full command tree, including one override flag per config key.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for key in default_config_object().keys() {
        let help = format!("Override config key `{key}`");
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(flag_name(key))
                .value_name("VALUE")
                .global(true)
                .help(help)
                .help_heading("Config overrides"),
        );
    }
    cmd
}

pub fn parse(matches: &ArgMatches) -> Result<(Cli, BTreeMap<String, String>), clap::Error> {
    let cli = Cli::from_arg_matches(matches)?;
    let mut sub = matches;
    while let Some((_, m)) = sub.subcommand() {
        sub = m;
    }
    let mut overrides = BTreeMap::new();
    for key in default_config_object().keys() {
        if let Some(v) = sub.get_one::<String>(key).or_else(|| matches.get_one::<String>(key)) {
            overrides.insert(key.clone(), v.clone());
        }
    }
    Ok((cli, overrides))
}

/// Interpret a flag value against the type of the key's default: JSON when
/// it parses, comma-separated lists for array keys, plain strings otherwise.
pub fn override_value(default: &Value, raw: &str) -> Value {
    let parsed = serde_json::from_str::<Value>(raw).ok();
    match default {
        Value::Array(_) => match parsed {
            Some(v @ Value::Array(_)) => v,
            _ => Value::Array(
                raw.split(',')
                    .map(|s| s.trim())
                    .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string())))
                    .collect(),
            ),
        },
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null => match parsed {
            Some(v @ (Value::Null | Value::Number(_) | Value::Bool(_))) => v,
            _ => Value::String(raw.to_string()),
        },
        _ => parsed.unwrap_or_else(|| Value::String(raw.to_string())),
    }
}

/// Defaults, then the config file, then flag overrides.
pub fn resolve_config(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    let defaults = default_config_object();
    let mut merged = defaults.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(obj) = v else {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        };
        for (k, v) in obj {
            merged.insert(k, v);
        }
    }
    for (k, raw) in overrides {
        merged.insert(k.clone(), override_value(&defaults[k], raw));
    }
    let text = Value::Object(merged).to_string();
    RunConfig::from_json(&text).map_err(CliError::from_config)
}
