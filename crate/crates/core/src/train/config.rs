//! Training configuration: TOML file plus `key=value` overrides.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::PatchSpec;
use crate::losses::{LossSwitches, LossWeights};
use crate::model::{Ablation, ModelConfig};
use crate::train::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    /// Stage I and joint training.
    pub learning_rate: f64,
    /// Stage II, which fine-tunes a trained network.
    pub learning_rate_stage2: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Train only the fusion layers in stage II.
    pub freeze_pretrained: bool,
    /// Train encoder, fusion layers and decoder together in one stage.
    pub joint: bool,
    pub seed: u64,
    pub losses: LossWeights,
    pub switches: LossSwitches,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 40,
            epochs_stage2: 80,
            batch_size: 6,
            patch_size: 128,
            patch_stride: 128,
            learning_rate: 1e-4,
            learning_rate_stage2: 1e-4,
            grad_clip: 5.0,
            freeze_pretrained: false,
            joint: false,
            seed: 0,
            losses: LossWeights::default(),
            switches: LossSwitches::default(),
            model: ModelConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: narrow network, 16-pixel patches, batches of 8.
    pub fn toy() -> Self {
        Self {
            epochs_stage1: 200,
            epochs_stage2: 100,
            batch_size: 8,
            patch_size: 16,
            patch_stride: 16,
            learning_rate: 2e-3,
            learning_rate_stage2: 5e-4,
            model: ModelConfig::toy(),
            ..Self::default()
        }
    }

    pub fn learning_rate_for(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Stage2 => self.learning_rate_stage2,
            Stage::Stage1 | Stage::Joint => self.learning_rate,
        }
    }

    pub fn patch(&self) -> Result<PatchSpec> {
        PatchSpec::new(self.patch_size, self.patch_stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(invalid!("epoch counts must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("learning_rate_stage2", self.learning_rate_stage2),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(invalid!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.grad_clip >= 0.0) {
            return Err(invalid!("grad_clip must be >= 0"));
        }
        let patch = self.patch()?;
        let m = self.model.graph.required_multiple();
        if self.ablation.use_graph && patch.size % m != 0 {
            return Err(invalid!(
                "patch_size {} must be a multiple of {m} for the graph branch",
                patch.size
            ));
        }
        if self.switches.semantic && patch.size % 8 != 0 {
            return Err(invalid!(
                "patch_size {} must be a multiple of 8 for the semantic loss",
                patch.size
            ));
        }
        self.losses.validate()?;
        self.model.validate()
    }

    /// Every dotted key the file format accepts, sorted.
    pub fn known_keys() -> Vec<String> {
        let v = toml::Value::try_from(Self::default()).expect("default config serializes");
        let mut out = BTreeSet::new();
        flatten_keys(&v, "", &mut out);
        out.into_iter().collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Merges `value` over the defaults after checking every key is known.
    fn from_value(value: toml::Value) -> Result<Self> {
        let mut keys = BTreeSet::new();
        flatten_keys(&value, "", &mut keys);
        let known: BTreeSet<String> = Self::known_keys().into_iter().collect();
        let unknown: Vec<_> = keys.difference(&known).cloned().collect();
        if !unknown.is_empty() {
            return Err(unknown_keys_error(&unknown));
        }
        let mut base = toml::Value::try_from(Self::default()).expect("default config serializes");
        merge(&mut base, value);
        let cfg: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; values are parsed as TOML literals and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let known: BTreeSet<String> = Self::known_keys().into_iter().collect();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{o}` is not of the form key=value"))
            })?;
            let key = key.trim();
            if !known.contains(key) {
                return Err(unknown_keys_error(&[key.to_string()]));
            }
            let parsed = parse_literal(raw.trim());
            set_path(&mut value, key, parsed);
        }
        Self::from_value(value)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn unknown_keys_error(unknown: &[String]) -> Error {
    Error::Config(format!(
        "unknown key(s): {}; known keys: {}",
        unknown.join(", "),
        TrainConfig::known_keys().join(", ")
    ))
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn flatten_keys(v: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_keys(child, &key, out);
            }
        }
        _ => {
            out.insert(prefix.to_string());
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = match cur {
            toml::Value::Table(t) => t
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            _ => return,
        };
    }
    if let toml::Value::Table(t) = cur {
        // Integers given for float keys are widened so `lr=1` works.
        let last = parts[parts.len() - 1];
        let value = match (t.get(last), value) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        t.insert(last.to_string(), value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_schedule() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.epochs_stage1, c.epochs_stage2, c.batch_size, c.patch_size),
            (40, 80, 6, 128)
        );
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.learning_rate_stage2, 1e-4);
        let w = c.losses;
        assert_eq!(
            (w.alpha1, w.beta1, w.beta2, w.alpha2, w.alpha3),
            (2.0, 8.0, 10.0, 10.0, 2.0)
        );
        assert_eq!(w.delta, 1.01);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let c = TrainConfig::toy();
        let text = c.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = TrainConfig::from_toml_str("batch_size = 4\n[losses]\nalpha1 = 5.0\n").unwrap();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.losses.alpha1, 5.0);
        assert_eq!(c.losses.beta1, 8.0);
    }

    #[test]
    fn unknown_key_is_named_with_known_list() {
        let err = TrainConfig::from_toml_str("[losses]\nalpha9 = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("losses.alpha9"), "{msg}");
        assert!(
            msg.contains("losses.alpha1") && msg.contains("model.cai.split"),
            "{msg}"
        );
    }

    #[test]
    fn overrides_parse_literals() {
        let c = TrainConfig::default()
            .with_overrides(&[
                "learning_rate=1",
                "ablation.use_graph=false",
                "ablation.aggregate=concat",
            ])
            .unwrap();
        assert_eq!(c.learning_rate, 1.0);
        assert!(!c.ablation.use_graph);
        assert_eq!(c.ablation.aggregate, crate::fusion::Aggregate::Concat);
        assert!(TrainConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(TrainConfig::default()
            .with_overrides(&["batch_size"])
            .is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::default()
            .with_overrides(&["learning_rate=0"])
            .is_err());
        assert!(TrainConfig::default()
            .with_overrides(&["learning_rate_stage2=-1"])
            .is_err());
        assert!(TrainConfig::default()
            .with_overrides(&["epochs_stage1=0"])
            .is_err());
        assert!(TrainConfig::default()
            .with_overrides(&["losses.delta=1.0"])
            .is_err());
    }
}
