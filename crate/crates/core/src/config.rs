//! Runtime configuration.
//!
//! Resolution: built-in defaults, overlaid by the JSON config file, overlaid
//! by `EXPFLOW_<FIELD>` environment variables, overlaid by explicit
//! `field=value` overrides from the command line. The file is taken from an
//! explicit path, else `EXPFLOW_CONFIG`, else `./expenseflow.json` if present.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::classifier::ClassifierOptions;
use crate::pipeline::PipelineSettings;
use crate::receipt::FieldName;

pub const CONFIG_ENV: &str = "EXPFLOW_CONFIG";
pub const ENV_PREFIX: &str = "EXPFLOW_";
pub const DEFAULT_CONFIG_FILE: &str = "expenseflow.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdvisorConfig {
    #[default]
    Stub,
    External {
        url: String,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
        #[serde(default)]
        prompt_path: Option<PathBuf>,
    },
}

fn default_timeout_s() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub store_path: PathBuf,
    pub event_log_path: PathBuf,
    pub export_sink_path: PathBuf,
    pub notification_log_path: PathBuf,
    pub confidence_threshold: u8,
    #[serde(deserialize_with = "field_set")]
    pub mandatory_fields: BTreeSet<FieldName>,
    pub tau_white: f64,
    pub tau_black: f64,
    pub strict_category: bool,
    pub advisor: AdvisorConfig,
    pub listen: String,
    pub webhook_url: Option<String>,
    /// Origin allowed to call the API from a browser.
    pub ui_origin: Option<String>,
    /// Directory the metrics endpoint may read label files from.
    pub labels_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self::in_dir(Path::new("data"))
    }
}

/// Accepts `["merchant","date"]` or `"merchant,date"`.
fn field_set<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<FieldName>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        List(Vec<String>),
        Csv(String),
    }
    let names = match Raw::deserialize(d)? {
        Raw::List(v) => v,
        Raw::Csv(s) => s.split(',').map(str::to_string).collect(),
    };
    names
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<FieldName>().map_err(de::Error::custom))
        .collect()
}

impl Config {
    /// Defaults with every data file placed under `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            store_path: dir.join("policy.json"),
            event_log_path: dir.join("events.jsonl"),
            export_sink_path: dir.join("exports.jsonl"),
            notification_log_path: dir.join("notifications.jsonl"),
            confidence_threshold: 50,
            mandatory_fields: FieldName::default_mandatory(),
            tau_white: crate::advisor::DEFAULT_TAU_WHITE,
            tau_black: crate::advisor::DEFAULT_TAU_BLACK,
            strict_category: true,
            advisor: AdvisorConfig::Stub,
            listen: "127.0.0.1:8080".into(),
            webhook_url: None,
            ui_origin: None,
            labels_dir: None,
        }
    }

    /// Resolves the configuration from the process environment.
    pub fn resolve(explicit: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        Self::resolve_with(explicit, std::env::vars(), overrides)
    }

    /// Same as [`Config::resolve`] with the environment passed in.
    pub fn resolve_with(
        explicit: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let env: Vec<(String, String)> = env.into_iter().collect();
        let env_file = env.iter().find(|(k, _)| k == CONFIG_ENV).map(|(_, v)| PathBuf::from(v));
        let (path, required) = match (explicit, env_file) {
            (Some(p), _) => (p.to_path_buf(), true),
            (None, Some(p)) => (p, true),
            (None, None) => (PathBuf::from(DEFAULT_CONFIG_FILE), false),
        };

        let mut merged = serde_json::to_value(Config::default()).expect("config serializes");
        if required || path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
            overlay(&mut merged, file)?;
        }

        let mut layer = Map::new();
        for (key, value) in &env {
            let Some(field) = key.strip_prefix(ENV_PREFIX) else { continue };
            let field = field.to_ascii_lowercase();
            // Unrelated EXPFLOW_* variables (e.g. EXPFLOW_CONFIG) are not fields.
            if merged.get(&field).is_none() {
                continue;
            }
            layer.insert(field, scalar(value));
        }
        overlay(&mut merged, Value::Object(layer))?;

        let mut layer = Map::new();
        for (field, value) in overrides {
            layer.insert(field.trim().to_string(), scalar(value));
        }
        overlay(&mut merged, Value::Object(layer))?;

        let config: Config = serde_json::from_value(merged).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.confidence_threshold > 100 {
            return Err(ConfigError::Invalid(format!(
                "confidence_threshold {} is outside [0, 100]",
                self.confidence_threshold
            )));
        }
        for (name, tau) in [("tau_white", self.tau_white), ("tau_black", self.tau_black)] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(ConfigError::Invalid(format!("{name} {tau} is outside [0, 1]")));
            }
        }
        if let AdvisorConfig::External { url, timeout_s, .. } = &self.advisor {
            if url.trim().is_empty() || !(timeout_s.is_finite() && *timeout_s > 0.0) {
                return Err(ConfigError::Invalid("external advisor needs a url and a positive timeout_s".into()));
            }
        }
        Ok(())
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            confidence_threshold: self.confidence_threshold,
            mandatory_fields: self.mandatory_fields.clone(),
            classifier: ClassifierOptions {
                strict_category: self.strict_category,
            },
        }
    }
}

/// Environment and flag values are JSON when they parse as JSON, otherwise
/// plain strings.
fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn overlay(base: &mut Value, layer: Value) -> Result<(), ConfigError> {
    let (Value::Object(base), Value::Object(layer)) = (base, layer) else {
        return Err(ConfigError::Invalid("config must be a JSON object".into()));
    };
    for (k, v) in layer {
        base.insert(k, v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_without_file() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        // An explicitly named file must exist.
        assert!(Config::resolve_with(Some(&missing), env(&[]), &[]).is_err());
        let c = Config::default();
        assert_eq!(c.confidence_threshold, 50);
        assert_eq!(c.mandatory_fields, FieldName::default_mandatory());
        assert!(c.strict_category);
        assert_eq!(c.advisor, AdvisorConfig::Stub);
    }

    #[test]
    fn precedence_flag_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"confidence_threshold": 40, "tau_white": 0.7, "listen": "0.0.0.0:9000", "mandatory_fields": ["total"]}"#,
        )
        .unwrap();
        let c = Config::resolve_with(
            Some(&path),
            env(&[("EXPFLOW_TAU_WHITE", "0.6"), ("EXPFLOW_CONFIDENCE_THRESHOLD", "45"), ("HOME", "/x")]),
            &[("confidence_threshold".into(), "55".into())],
        )
        .unwrap();
        assert_eq!(c.confidence_threshold, 55);
        assert_eq!(c.tau_white, 0.6);
        assert_eq!(c.listen, "0.0.0.0:9000");
        assert_eq!(c.mandatory_fields, BTreeSet::from([FieldName::Total]));
    }

    #[test]
    fn env_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"advisor": {"kind": "external", "url": "http://localhost:1/x"}}"#).unwrap();
        let c = Config::resolve_with(None, env(&[("EXPFLOW_CONFIG", path.to_str().unwrap())]), &[]).unwrap();
        assert!(matches!(c.advisor, AdvisorConfig::External { timeout_s, .. } if timeout_s == 30.0));
    }

    #[test]
    fn comma_separated_fields_and_validation() {
        let c = Config::resolve_with(
            None,
            env(&[("EXPFLOW_MANDATORY_FIELDS", "merchant, total"), ("EXPFLOW_UNRELATED", "x")]),
            &[],
        )
        .unwrap();
        assert_eq!(c.mandatory_fields, BTreeSet::from([FieldName::Merchant, FieldName::Total]));

        let err = Config::resolve_with(None, env(&[]), &[("tau_black".into(), "1.5".into())]).unwrap_err();
        assert!(err.to_string().contains("tau_black"));
        let err = Config::resolve_with(None, env(&[]), &[("confidence_threshold".into(), "101".into())]).unwrap_err();
        assert!(err.to_string().contains("confidence_threshold"));
        assert!(Config::resolve_with(None, env(&[]), &[("bogus".into(), "1".into())]).is_err());
    }
}
