//! Run configuration as one flat JSON object with dotted keys.
//!
//! The published hyperparameter names (`bag_size`, `lr`, `fixbase`,
//! `margin`, ...) are accepted alongside the canonical dotted keys. `margin`
//! sets both the triplet and the alignment margin unless `m_align` is given
//! explicitly.

use std::path::Path;

use serde_json::{Map, Value};

use crate::autodiff::DistanceKind;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::models::{AccumulatorKind, ExtractorKind};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunPaths {
    pub train: Option<String>,
    pub val: Option<String>,
    pub test: Option<String>,
    pub out: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: RunPaths,
    pub eval: EvalOptions,
}

/// Canonical keys in output order.
pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "seed",
    "learning_rate",
    "fixbase_epochs",
    "early_stop_patience",
    "sampler.subbag_size",
    "sampler.batch_size",
    "sampler.seed",
    "losses.alpha",
    "losses.beta",
    "losses.gamma",
    "losses.m_triplet",
    "losses.m_align",
    "losses.distance",
    "extractor.kind",
    "extractor.input_shape",
    "extractor.embed_dim",
    "extractor.hidden_sizes",
    "extractor.feature_norm",
    "accumulator.kind",
    "accumulator.st_layers",
    "accumulator.st_heads",
    "accumulator.st_hidden",
    "accumulator.seed",
    "paths.train",
    "paths.val",
    "paths.test",
    "paths.out",
    "eval.exclude_same_camera",
];

fn canonical(key: &str) -> Option<&'static str> {
    let k = match key {
        "bag_size" => "sampler.subbag_size",
        "batch_size" => "sampler.batch_size",
        "distance" => "losses.distance",
        "fixbase" => "fixbase_epochs",
        "lr" => "learning_rate",
        "feature_norm" => "extractor.feature_norm",
        "alpha" | "beta" | "gamma" | "m_triplet" | "m_align" => {
            return CONFIG_KEYS.iter().copied().find(|c| c.strip_prefix("losses.") == Some(key))
        }
        other => other,
    };
    CONFIG_KEYS.iter().copied().find(|c| *c == k)
}

fn bad(key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    // accept integral floats so sampled search points convert cleanly
    v.as_u64()
        .or_else(|| v.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64))
        .map(|u| u as usize)
        .ok_or_else(|| bad(key, "a non-negative integer", v))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| bad(key, "a number", v))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, "true or false", v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, "a string", v))
}

fn as_path(key: &str, v: &Value) -> Result<Option<String>> {
    match v {
        Value::Null => Ok(None),
        _ => Ok(Some(as_str(key, v)?.to_owned())),
    }
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    v.as_array()
        .ok_or_else(|| bad(key, "an array of integers", v))?
        .iter()
        .map(|x| as_usize(key, x))
        .collect()
}

impl RunConfig {
    /// Applies one key. Returns an error for unknown keys and ill-typed
    /// values.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.train;
        if key == "margin" {
            t.losses.m_triplet = as_f64(key, v)?;
            t.losses.m_align = t.losses.m_triplet;
            return Ok(());
        }
        let Some(k) = canonical(key) else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        };
        match k {
            "epochs" => t.epochs = as_usize(key, v)?,
            "seed" => t.seed = as_usize(key, v)? as u64,
            "learning_rate" => t.learning_rate = as_f64(key, v)?,
            "fixbase_epochs" => t.fixbase_epochs = as_usize(key, v)?,
            "early_stop_patience" => t.early_stop_patience = as_usize(key, v)?,
            "sampler.subbag_size" => t.sampler.subbag_size = as_usize(key, v)?,
            "sampler.batch_size" => t.sampler.batch_size = as_usize(key, v)?,
            "sampler.seed" => t.sampler.seed = as_usize(key, v)? as u64,
            "losses.alpha" => t.losses.alpha = as_f64(key, v)?,
            "losses.beta" => t.losses.beta = as_f64(key, v)?,
            "losses.gamma" => t.losses.gamma = as_f64(key, v)?,
            "losses.m_triplet" => t.losses.m_triplet = as_f64(key, v)?,
            "losses.m_align" => t.losses.m_align = as_f64(key, v)?,
            "losses.distance" => {
                t.losses.distance = as_str(key, v)?.parse::<DistanceKind>()?
            }
            "extractor.kind" => t.extractor.kind = as_str(key, v)?.parse::<ExtractorKind>()?,
            "extractor.input_shape" => t.extractor.input_shape = as_usize_list(key, v)?,
            "extractor.embed_dim" => t.extractor.embed_dim = as_usize(key, v)?,
            "extractor.hidden_sizes" => t.extractor.hidden_sizes = as_usize_list(key, v)?,
            "extractor.feature_norm" => t.extractor.feature_norm = as_bool(key, v)?,
            "accumulator.kind" => {
                t.accumulator.kind = as_str(key, v)?.parse::<AccumulatorKind>()?
            }
            "accumulator.st_layers" => t.accumulator.st_layers = as_usize(key, v)?,
            "accumulator.st_heads" => t.accumulator.st_heads = as_usize(key, v)?,
            "accumulator.st_hidden" => t.accumulator.st_hidden = as_usize(key, v)?,
            "accumulator.seed" => t.accumulator.seed = as_usize(key, v)? as u64,
            "paths.train" => self.paths.train = as_path(key, v)?,
            "paths.val" => self.paths.val = as_path(key, v)?,
            "paths.test" => self.paths.test = as_path(key, v)?,
            "paths.out" => self.paths.out = as_path(key, v)?,
            "eval.exclude_same_camera" => self.eval.exclude_same_camera = as_bool(key, v)?,
            _ => unreachable!("every canonical key is handled"),
        }
        Ok(())
    }

    /// Applies every key of `obj` on top of `self`. An explicit alignment
    /// margin wins over `margin` regardless of key order.
    pub fn apply(&mut self, obj: &Map<String, Value>) -> Result<()> {
        let is_align = |k: &str| k == "m_align" || k == "losses.m_align";
        for (k, v) in obj.iter().filter(|(k, _)| !is_align(k)) {
            self.set(k, v)?;
        }
        for (k, v) in obj.iter().filter(|(k, _)| is_align(k)) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_flat_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(Error::from_json)?;
        let Value::Object(obj) = v else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut cfg = Self::default();
        cfg.apply(&obj)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_flat_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_flat_map(&self) -> Map<String, Value> {
        let t = &self.train;
        let path = |p: &Option<String>| p.clone().map_or(Value::Null, Value::from);
        let mut m = Map::new();
        for &k in CONFIG_KEYS {
            let v = match k {
                "epochs" => t.epochs.into(),
                "seed" => t.seed.into(),
                "learning_rate" => t.learning_rate.into(),
                "fixbase_epochs" => t.fixbase_epochs.into(),
                "early_stop_patience" => t.early_stop_patience.into(),
                "sampler.subbag_size" => t.sampler.subbag_size.into(),
                "sampler.batch_size" => t.sampler.batch_size.into(),
                "sampler.seed" => t.sampler.seed.into(),
                "losses.alpha" => t.losses.alpha.into(),
                "losses.beta" => t.losses.beta.into(),
                "losses.gamma" => t.losses.gamma.into(),
                "losses.m_triplet" => t.losses.m_triplet.into(),
                "losses.m_align" => t.losses.m_align.into(),
                "losses.distance" => t.losses.distance.to_string().into(),
                "extractor.kind" => t.extractor.kind.to_string().into(),
                "extractor.input_shape" => t.extractor.input_shape.clone().into(),
                "extractor.embed_dim" => t.extractor.embed_dim.into(),
                "extractor.hidden_sizes" => t.extractor.hidden_sizes.clone().into(),
                "extractor.feature_norm" => t.extractor.feature_norm.into(),
                "accumulator.kind" => t.accumulator.kind.to_string().into(),
                "accumulator.st_layers" => t.accumulator.st_layers.into(),
                "accumulator.st_heads" => t.accumulator.st_heads.into(),
                "accumulator.st_hidden" => t.accumulator.st_hidden.into(),
                "accumulator.seed" => t.accumulator.seed.into(),
                "paths.train" => path(&self.paths.train),
                "paths.val" => path(&self.paths.val),
                "paths.test" => path(&self.paths.test),
                "paths.out" => path(&self.paths.out),
                "eval.exclude_same_camera" => self.eval.exclude_same_camera.into(),
                _ => unreachable!(),
            };
            m.insert(k.to_owned(), v);
        }
        m
    }

    pub fn to_flat_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_flat_map()))
            .expect("config serializes");
        s.push('\n');
        s
    }

    /// The configuration a search trial trains with: `point` applied on top
    /// of `self`, `epochs` fixed to the rung budget, and the fixbase period
    /// clamped to fit inside it.
    pub fn trial(&self, point: &Map<String, Value>, epochs: usize) -> Result<TrainConfig> {
        let mut c = self.clone();
        c.apply(point)?;
        c.train.epochs = epochs;
        c.train.fixbase_epochs = c.train.fixbase_epochs.min(epochs);
        c.train.validate()?;
        Ok(c.train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn published_market_values_are_accepted_verbatim() {
        let cfg = RunConfig::from_flat_json(
            r#"{"bag_size": 6, "batch_size": 10, "distance": "cosine", "fixbase": 7,
                "lr": 2.1153e-4, "margin": 0.9992, "feature_norm": false, "gamma": 0,
                "alpha": 0.5638, "beta": 0.3872}"#,
        )
        .unwrap();
        let t = &cfg.train;
        assert_eq!(t.sampler.subbag_size, 6);
        assert_eq!(t.sampler.batch_size, 10);
        assert_eq!(t.losses.distance, DistanceKind::Cosine);
        assert_eq!(t.fixbase_epochs, 7);
        assert_eq!(t.learning_rate, 2.1153e-4);
        assert_eq!(t.losses.m_triplet, 0.9992);
        assert_eq!(t.losses.m_align, 0.9992);
        assert!(!t.extractor.feature_norm);
        assert_eq!(t.losses.gamma, 0.0);
        assert_eq!(t.losses.alpha, 0.5638);
        assert_eq!(t.losses.beta, 0.3872);
    }

    #[test]
    fn explicit_alignment_margin_wins_in_any_order() {
        for text in [
            r#"{"m_align": 0.2, "margin": 0.9}"#,
            r#"{"margin": 0.9, "m_align": 0.2}"#,
        ] {
            let c = RunConfig::from_flat_json(text).unwrap();
            assert_eq!(c.train.losses.m_triplet, 0.9);
            assert_eq!(c.train.losses.m_align, 0.2);
        }
    }

    #[test]
    fn unknown_keys_and_bad_types_fail() {
        let e = RunConfig::from_flat_json(r#"{"bagsize": 6}"#).unwrap_err();
        assert!(e.to_string().contains("bagsize"));
        assert!(RunConfig::from_flat_json(r#"{"lr": "fast"}"#).is_err());
        assert!(RunConfig::from_flat_json(r#"{"epochs": -1}"#).is_err());
        assert!(RunConfig::from_flat_json(r#"{"distance": "manhattan"}"#).is_err());
        assert!(RunConfig::from_flat_json("[1]").is_err());
    }

    #[test]
    fn flat_json_round_trips_exactly() {
        let mut c = RunConfig::default();
        c.apply(
            json!({
                "lr": 0.1 + 0.2,
                "accumulator.kind": "set_transformer",
                "extractor.kind": "toy_cnn",
                "extractor.input_shape": [1, 4, 4],
                "paths.train": "data/train.json",
                "eval.exclude_same_camera": true
            })
            .as_object()
            .unwrap(),
        )
        .unwrap();
        let text = c.to_flat_json();
        assert_eq!(RunConfig::from_flat_json(&text).unwrap(), c);
        let keys: Vec<String> = serde_json::from_str::<Map<String, Value>>(&text)
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(keys, CONFIG_KEYS);
    }

    #[test]
    fn trial_clamps_fixbase_to_rung_budget() {
        let mut base = RunConfig::default();
        base.train.extractor.embed_dim = 16;
        let point = json!({"fixbase": 9, "batch_size": 5.0, "lr": 1e-3});
        let t = base.trial(point.as_object().unwrap(), 3).unwrap();
        assert_eq!(t.epochs, 3);
        assert_eq!(t.fixbase_epochs, 3);
        assert_eq!(t.sampler.batch_size, 5);
        for point in crate::training::SearchSpace::default_space().sample_points() {
            base.trial(&point, 3).unwrap();
        }
    }
}
