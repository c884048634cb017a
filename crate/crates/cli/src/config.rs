//! Flat JSON run configuration.
//!
//! Keys are the `Hyperparams` field names plus the dataset keys below.
//! `seed` drives both the generator and training. Unknown keys are errors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use pal_core::scheduler::SyntheticConfig;
use pal_core::Hyperparams;
use serde::Deserialize;
use serde_json::{Map, Value};

pub const DATASET_KEYS: &[&str] = &["n_train", "n_test", "easy_frac", "height", "width"];

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetKeys {
    n_train: usize,
    n_test: usize,
    easy_frac: f64,
    height: usize,
    width: usize,
}

impl Default for DatasetKeys {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            n_train: d.n_train,
            n_test: d.n_test,
            easy_frac: d.easy_frac,
            height: d.height,
            width: d.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hp: Hyperparams,
    pub data: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_value(Value::Object(Map::new())).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(map) = value else {
            bail!("config must be a JSON object");
        };
        let (mut hp_keys, mut data_keys) = (Map::new(), Map::new());
        let mut unknown = Vec::new();
        for (k, v) in map {
            if Hyperparams::FIELD_NAMES.contains(&k.as_str()) {
                hp_keys.insert(k, v);
            } else if DATASET_KEYS.contains(&k.as_str()) {
                data_keys.insert(k, v);
            } else {
                unknown.push(k);
            }
        }
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        let hp: Hyperparams = serde_json::from_value(Value::Object(hp_keys))?;
        hp.validate()?;
        let d: DatasetKeys = serde_json::from_value(Value::Object(data_keys))?;
        if !(0.0..=1.0).contains(&d.easy_frac) {
            bail!("easy_frac must lie in [0,1]");
        }
        if d.n_train == 0 || d.n_test == 0 {
            bail!("n_train and n_test must be positive");
        }
        let data = SyntheticConfig {
            n_train: d.n_train,
            n_test: d.n_test,
            easy_frac: d.easy_frac,
            height: d.height,
            width: d.width,
            seed: hp.seed,
        };
        Ok(Self { hp, data })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Self::from_value(value)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.hp.seed = s;
            self.data.seed = s;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_object_is_defaults() {
        let c = RunConfig::from_value(json!({})).unwrap();
        assert_eq!(c.hp, Hyperparams::default());
        assert_eq!(c.data, SyntheticConfig::default());
    }

    #[test]
    fn keys_route_to_both_halves() {
        let c = RunConfig::from_value(json!({"n_train": 10, "lambda_decay": 0.9, "seed": 7})).unwrap();
        assert_eq!(c.data.n_train, 10);
        assert_eq!(c.hp.lambda_decay, 0.9);
        assert_eq!((c.hp.seed, c.data.seed), (7, 7));
    }

    #[test]
    fn typos_rejected() {
        let err = RunConfig::from_value(json!({"lamda_decay": 0.9})).unwrap_err();
        assert!(err.to_string().contains("lamda_decay"));
        assert!(RunConfig::from_value(json!([1, 2])).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_value(json!({"d": 32})).is_err());
        assert!(RunConfig::from_value(json!({"easy_frac": 1.5})).is_err());
        assert!(RunConfig::from_value(json!({"r": "big"})).is_err());
    }

    #[test]
    fn seed_override() {
        let c = RunConfig::default().with_seed(Some(9));
        assert_eq!((c.hp.seed, c.data.seed), (9, 9));
    }
}
