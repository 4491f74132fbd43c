//! Training configuration files.
//!
//! Every key must be present and unknown keys are rejected, so a typo never
//! silently falls back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stable_fi_core::objective::HyperParams;
use stable_fi_core::trainer::{MetaMode, ObjectiveKind, TrainConfig};
use stable_fi_core::ModelKind;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model_kind: String,
    pub objective_kind: String,
    pub embed_dim: usize,
    pub init_scale: f64,
    pub lambda: f64,
    pub eta: f64,
    pub tau: f64,
    pub l2_embed: f64,
    pub lr_shared: f64,
    pub lr_inner: f64,
    pub lr_outer: f64,
    pub lr_env: f64,
    pub batch_per_env: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub meta_mode: String,
    pub seed: u64,
    pub deterministic: bool,
}

impl ConfigFile {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            model_kind: cfg.model_kind.as_str().to_string(),
            objective_kind: cfg.objective_kind.as_str().to_string(),
            embed_dim: cfg.embed_dim,
            init_scale: cfg.init_scale,
            lambda: cfg.hyper.lambda,
            eta: cfg.hyper.eta,
            tau: cfg.hyper.tau,
            l2_embed: cfg.hyper.l2_embed,
            lr_shared: cfg.lr_shared,
            lr_inner: cfg.lr_inner,
            lr_outer: cfg.lr_outer,
            lr_env: cfg.lr_env,
            batch_per_env: cfg.batch_per_env,
            max_steps: cfg.max_steps,
            eval_every: cfg.eval_every,
            patience: cfg.patience,
            meta_mode: cfg.meta_mode.as_str().to_string(),
            seed: cfg.seed,
            deterministic: cfg.deterministic,
        }
    }

    pub fn to_config(&self) -> Result<TrainConfig> {
        let bad = |key: &str, value: &str| Error::Invalid(format!("config key `{key}`: unknown value `{value}`"));
        let cfg = TrainConfig {
            model_kind: ModelKind::parse(&self.model_kind)
                .ok_or_else(|| bad("model_kind", &self.model_kind))?,
            objective_kind: ObjectiveKind::parse(&self.objective_kind)
                .ok_or_else(|| bad("objective_kind", &self.objective_kind))?,
            embed_dim: self.embed_dim,
            init_scale: self.init_scale,
            hyper: HyperParams {
                lambda: self.lambda,
                eta: self.eta,
                tau: self.tau,
                l2_embed: self.l2_embed,
            },
            lr_shared: self.lr_shared,
            lr_inner: self.lr_inner,
            lr_outer: self.lr_outer,
            lr_env: self.lr_env,
            batch_per_env: self.batch_per_env,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            patience: self.patience,
            meta_mode: MetaMode::parse(&self.meta_mode).ok_or_else(|| bad("meta_mode", &self.meta_mode))?,
            seed: self.seed,
            deterministic: self.deterministic,
        };
        cfg.validate()
            .map_err(|e| Error::Invalid(format!("invalid config: {e}")))?;
        Ok(cfg)
    }
}

pub fn parse_config(text: &str) -> std::result::Result<TrainConfig, String> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    file.to_config().map_err(|e| e.to_string())
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ConfigFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    file.to_config()
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn config_to_json(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(&ConfigFile::from_config(cfg)).expect("config serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_the_default() {
        let cfg = TrainConfig::default();
        assert_eq!(parse_config(&config_to_json(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&config_to_json(&TrainConfig::default())).unwrap();
        v["lamda"] = 0.1.into();
        let err = parse_config(&v.to_string()).unwrap_err();
        assert!(err.contains("lamda"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&config_to_json(&TrainConfig::default())).unwrap();
        v.as_object_mut().unwrap().remove("patience");
        let err = parse_config(&v.to_string()).unwrap_err();
        assert!(err.contains("patience"), "{err}");
    }

    #[test]
    fn bad_enum_values_are_named() {
        let mut v: serde_json::Value = serde_json::from_str(&config_to_json(&TrainConfig::default())).unwrap();
        v["meta_mode"] = "second_order".into();
        let err = parse_config(&v.to_string()).unwrap_err();
        assert!(err.contains("meta_mode"), "{err}");
    }

    #[test]
    fn semantic_validation_applies() {
        let mut v: serde_json::Value = serde_json::from_str(&config_to_json(&TrainConfig::default())).unwrap();
        v["objective_kind"] = "dil".into();
        assert!(parse_config(&v.to_string()).is_err());
        v["model_kind"] = "lightdil".into();
        assert!(parse_config(&v.to_string()).is_ok());
        v["patience"] = 0.into();
        assert!(parse_config(&v.to_string()).is_err());
    }
}
