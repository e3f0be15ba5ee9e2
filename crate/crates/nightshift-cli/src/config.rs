//! Run configuration: one JSON document covering model architecture,
//! training hyperparameters, and optional dataset/output paths. Every field
//! has a default, so `{}` is a valid config; unknown keys are rejected by
//! name rather than silently ignored.

use std::path::PathBuf;

use nightshift::trainer::TrainConfig;
use nightshift::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data_a: Option<PathBuf>,
    pub data_b: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

const TOP_KEYS: &[&str] = &[
    "lr", "batch", "steps", "beta1", "beta2", "eps", "schedule", "seed", "ckpt_every",
    "gan_mode", "weights", "backbone", "aggregator", "nce", "data_a", "data_b", "out",
];

const SECTIONS: &[(&str, &[&str])] = &[
    ("weights", &["lambda_glob", "lambda_ins", "lambda_style", "lambda_img"]),
    ("backbone", &["image_size", "base_channels", "content_channels", "style_dim"]),
    ("aggregator", &["patch_stride", "token_dim", "blocks", "heads", "mlp_dim", "freq_bands"]),
    ("nce", &["temperature", "layers", "patches_per_layer", "projection_dim"]),
];

/// Parses and validates a config document. Defaults fill in everything that
/// is absent; the first unknown key aborts with its (dotted) name.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let Some(obj) = value.as_object() else {
        return Err(Error::Config("config root must be a JSON object".into()));
    };
    for (key, sub) in obj {
        if !TOP_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key \"{key}\"")));
        }
        if let Some((_, allowed)) = SECTIONS.iter().find(|(name, _)| name == key) {
            let Some(sobj) = sub.as_object() else {
                return Err(Error::Config(format!("config key \"{key}\" must be an object")));
            };
            for skey in sobj.keys() {
                if !allowed.contains(&skey.as_str()) {
                    return Err(Error::Config(format!("unknown config key \"{key}.{skey}\"")));
                }
            }
        }
    }
    let rc: RunConfig = serde_json::from_value(value)?;
    rc.train.validate()?;
    Ok(rc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let rc = parse_run_config("{}").unwrap();
        assert_eq!(rc, RunConfig::default());
        assert_eq!(rc.train.lr, 2e-4);
        assert_eq!(rc.train.batch, 2);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_run_config(r#"{"lrr": 1}"#).unwrap_err();
        assert!(err.to_string().contains("lrr"), "{err}");
        let err = parse_run_config(r#"{"backbone": {"depth": 9}}"#).unwrap_err();
        assert!(err.to_string().contains("backbone.depth"), "{err}");
    }

    #[test]
    fn schema_covers_every_serialized_key() {
        // guards against struct fields drifting away from the key lists
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        for (key, sub) in v.as_object().unwrap() {
            assert!(TOP_KEYS.contains(&key.as_str()), "schema misses {key}");
            if let Some((_, allowed)) = SECTIONS.iter().find(|(name, _)| name == key) {
                for skey in sub.as_object().unwrap().keys() {
                    assert!(allowed.contains(&skey.as_str()), "schema misses {key}.{skey}");
                }
            }
        }
        // and the round trip re-parses cleanly
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(parse_run_config(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(parse_run_config(r#"{"batch": 0}"#).is_err());
        assert!(parse_run_config(r#"{"lr": -1.0}"#).is_err());
        assert!(parse_run_config("[]").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let rc = parse_run_config(r#"{"backbone": {"image_size": 32, "base_channels": 4, "content_channels": 16}, "steps": 5}"#)
            .unwrap();
        assert_eq!(rc.train.backbone.image_size, 32);
        assert_eq!(rc.train.backbone.style_dim, 8);
        assert_eq!(rc.train.steps, 5);
    }
}
