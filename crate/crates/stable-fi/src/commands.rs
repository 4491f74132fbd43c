//! The `gen`, `train` and `eval` subcommands. Each returns the line(s) to
//! print on success.

use std::path::{Path, PathBuf};

use stable_fi_core::metrics::evaluate_split;
use stable_fi_core::synth::{generate, SynthConfig, SynthKind};
use stable_fi_core::trainer::train;

use crate::config::load_config;
use crate::dataset::{fnv1a64, hex16, load_splits, schema_hash, write_dataset, SplitCounts, TRUTH_FILE};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model_file::{load_model_file, save_model};
use crate::report::{history_to_json, summary_line, truth_to_json, EvalEcho, ReportFile};

pub const HISTORY_FILE: &str = "history.json";

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub kind: SynthKind,
    pub out: PathBuf,
    pub seed: u64,
    pub envs: Option<usize>,
    pub per_env: Option<usize>,
    pub fields: Option<Vec<usize>>,
}

/// Builds the generator configuration for the given flags. Default stable
/// pairs that refer to fields beyond a custom `--fields` list are dropped.
pub fn synth_config(args: &GenArgs) -> SynthConfig {
    let mut cfg = SynthConfig {
        seed: args.seed,
        ..SynthConfig::default()
    };
    if let Some(n) = args.envs {
        cfg.num_envs = n;
    }
    if let Some(n) = args.per_env {
        cfg.instances_per_env = n;
    }
    if let Some(fields) = &args.fields {
        cfg.base_fields = fields.clone();
        let m = fields.len();
        cfg.stable_pairs.retain(|p| p.field_a < m && p.field_b < m);
    }
    cfg
}

pub fn cmd_gen(args: &GenArgs) -> Result<String> {
    let cfg = synth_config(args);
    let data = generate(args.kind, &cfg)?;
    write_dataset(&args.out, &data.schema, &data.envs)?;
    write_atomic(&args.out.join(TRUTH_FILE), truth_to_json(&data.truth).as_bytes())?;
    let total: usize = data.envs.iter().map(|e| e.len()).sum();
    Ok(format!(
        "wrote {} environments, {} instances, {} fields / {} features to {}",
        data.envs.len(),
        total,
        data.schema.num_fields(),
        data.schema.num_features(),
        args.out.display()
    ))
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub model_out: PathBuf,
    pub seed: Option<u64>,
    pub counts: SplitCounts,
}

pub fn history_path(model_out: &Path) -> PathBuf {
    match model_out.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(HISTORY_FILE),
        _ => PathBuf::from(HISTORY_FILE),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let splits = load_splits(&args.data, args.counts)?;
    let (model, history) = train(&splits, &cfg)?;
    save_model(&args.model_out, &model)?;
    write_atomic(&history_path(&args.model_out), history_to_json(&history).as_bytes())?;
    let report = evaluate_split(&model, &splits.schema, &splits.valid)?;
    Ok(format!(
        "trained {} / {} for {} evaluations (best step {}, stopped by {}); valid {}",
        cfg.model_kind,
        cfg.objective_kind,
        history.records.len(),
        history
            .best_step
            .map_or_else(|| "none".to_string(), |s| s.to_string()),
        history.stop_reason.as_str(),
        summary_line(&report)
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub data: PathBuf,
    pub split: Split,
    pub model: PathBuf,
    pub report: PathBuf,
    pub counts: SplitCounts,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let splits = load_splits(&args.data, args.counts)?;
    let (file, bytes) = load_model_file(&args.model)?;
    let model = file.into_model(&splits.schema).map_err(|e| match e {
        Error::SchemaHash { .. } | Error::Invalid(_) => {
            Error::Invalid(format!("{}: {e}", args.model.display()))
        }
        other => other,
    })?;
    let envs = match args.split {
        Split::Train => &splits.train,
        Split::Valid => &splits.valid,
        Split::Test => &splits.test,
    };
    let report = evaluate_split(&model, &splits.schema, envs)?;
    let echo = EvalEcho {
        split: args.split.as_str().to_string(),
        train_envs: args.counts.train,
        valid_envs: args.counts.valid,
        test_envs: args.counts.test,
        model_kind: model.kind().as_str().to_string(),
        embed_dim: model.dim(),
        schema_hash: schema_hash(&splits.schema),
    };
    let file = ReportFile::new(&report, hex16(fnv1a64(&bytes)), model.seed(), echo);
    write_atomic(&args.report, file.to_json().as_bytes())?;
    Ok(summary_line(&report))
}
