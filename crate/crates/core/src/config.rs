//! Run configuration: one TOML file with `[data]`, `[model]`, `[train]` and
//! `[eval]` sections. Every field has a default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::scenekit::DatasetConfig;
use crate::train::TrainConfig;
use crate::util::sha256_hex;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if given, applies `section.key=value` overrides and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Values are parsed as TOML literals, falling back to a bare string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).expect("config serializes");
        for (key, raw) in overrides {
            let path: Vec<&str> = key.split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("override key {key:?} must look like section.field")));
            }
            let mut node = &mut doc;
            for part in &path {
                node = node
                    .as_table_mut()
                    .and_then(|t| t.get_mut(*part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            if node.is_table() {
                return Err(Error::Config(format!("{key:?} is a section, not a value")));
            }
            *node = parse_literal(raw, node);
        }
        doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.image_res != self.data.res {
            return Err(Error::Config(format!(
                "model.image_res {} does not match data.res {}",
                self.model.image_res, self.data.res
            )));
        }
        if self.eval.holdout >= self.data.objects {
            return Err(Error::Config("eval.holdout must leave at least one training object".into()));
        }
        if self.eval.iterations == 0 || self.eval.max_iterations == 0 {
            return Err(Error::Config("eval iteration counts must be positive".into()));
        }
        Ok(())
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())[..16].to_string()
    }
}

fn parse_literal(raw: &str, current: &toml::Value) -> toml::Value {
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, current) {
        // integers given where floats are expected
        (Some(toml::Value::Integer(i)), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (Some(v), _) => v,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlr = 1e-3\nlearning_rate = 2").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nlr = 1").is_err());
        let ov = |k: &str, v: &str| vec![(k.to_string(), v.to_string())];
        assert!(RunConfig::default().with_overrides(&ov("train.lrr", "1")).is_err());
        assert!(RunConfig::default().with_overrides(&ov("lr", "1")).is_err());
        assert!(RunConfig::default().with_overrides(&ov("train.lr", "\"fast\"")).is_err());
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = RunConfig::default();
        let cfg = base
            .with_overrides(&[("train.lr".into(), "2e-3".into()), ("train.unroll".into(), "2".into()), ("train.lr".into(), "3".into())])
            .unwrap();
        assert_eq!(cfg.train.lr, 3.0);
        assert_eq!(cfg.train.unroll, 2);
        let w = base.with_overrides(&[("train.weights.normal".into(), "0.5".into())]).unwrap();
        assert_eq!(w.train.weights.normal, 0.5);
        assert!(base.with_overrides(&[("train.weights".into(), "1".into())]).is_err());
        assert_ne!(cfg.hash(), base.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("[data]\nobjects = 5\n").unwrap();
        assert_eq!(cfg.data.objects, 5);
        assert_eq!(cfg.model, ModelConfig::default());
    }
}
