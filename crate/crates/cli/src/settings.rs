//! Key-value configuration.
//!
//! A config file holds one `key = value` pair per line. `#` starts a comment,
//! blank lines are ignored, keys may appear once. Command-line `--set
//! key=value` pairs are applied after the file. Every key must name a field
//! of the command's settings; values are parsed according to the type of the
//! field's default.

use std::collections::BTreeMap;
use std::path::Path;

use airtime::embedding::EmbeddingKind;
use airtime::model::{HeadConfig, ModelConfig};
use airtime::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::failure::{CliResult, Failure};

pub fn parse_pairs(text: &str, origin: &str) -> CliResult<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Failure::usage(format!(
                "{origin}:{}: expected key = value, got {line:?}",
                i + 1
            ))
        })?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Failure::usage(format!("{origin}:{}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Failure::usage(format!(
                "{origin}:{}: duplicate key {k:?}",
                i + 1
            )));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn parse_override(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Failure::usage(format!("--set expects key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn coerce(key: &str, default: &Value, raw: &str) -> CliResult<Value> {
    let bad = |what: &str| Failure::usage(format!("{key}: expected {what}, got {raw:?}"));
    Ok(match default {
        Value::Number(n) if n.is_f64() => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Number(Number::from_f64(v).ok_or_else(|| bad("a finite number"))?)
        }
        Value::Number(_) => Value::Number(
            raw.parse::<u64>()
                .map_err(|_| bad("a non-negative integer"))?
                .into(),
        ),
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        _ => Value::String(raw.to_string()),
    })
}

/// Overlays the config file and the `--set` pairs on `defaults`.
pub fn load<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[String],
) -> CliResult<T> {
    let mut pairs = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        pairs.extend(parse_pairs(&text, &path.display().to_string())?);
    }
    for s in overrides {
        pairs.push(parse_override(s)?);
    }
    let Value::Object(mut map) =
        serde_json::to_value(defaults).map_err(|e| Failure::runtime(e.to_string()))?
    else {
        unreachable!("settings serialize to objects");
    };
    for (k, raw) in pairs {
        let default = map.get(&k).ok_or_else(|| {
            let known: Vec<&str> = map.keys().map(String::as_str).collect();
            Failure::usage(format!(
                "unknown config key {k:?} (known keys: {})",
                known.join(", ")
            ))
        })?;
        let v = coerce(&k, default, &raw)?;
        map.insert(k, v);
    }
    serde_json::from_value(Value::Object(map))
        .map_err(|e| Failure::usage(format!("invalid config: {e}")))
}

/// Flat view of the model and optimizer configuration plus the data
/// options of `train` and `finetune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    /// `gcn` or `fixed`.
    pub embedding: String,
    /// Width of the graph-convolution path and of the encoder it feeds.
    pub width: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub fixed_width: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    /// `crf` or `classification`.
    pub head: String,
    /// Comma-separated class names; empty takes the sorted dataset categories.
    pub classes: String,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub max_len: usize,
    /// Trim-augmentation stride for training records; 0 disables it.
    pub augment_stride: usize,
    /// Share of the dataset held out for per-epoch validation.
    pub val_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

impl TrainSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let m = &cfg.model;
        let (head, classes) = match &m.head {
            HeadConfig::Crf => ("crf", String::new()),
            HeadConfig::Classification { classes } => ("classification", classes.join(",")),
        };
        TrainSettings {
            embedding: match m.embedding.kind {
                EmbeddingKind::Gcn => "gcn",
                EmbeddingKind::Fixed => "fixed",
            }
            .to_string(),
            width: m.embedding.width,
            gcn_layers: m.embedding.gcn_layers,
            gcn_hidden: m.embedding.gcn_hidden,
            fixed_width: m.embedding.fixed_width,
            encoder_layers: m.encoder.layers,
            heads: m.encoder.heads,
            ffn: m.encoder.ffn,
            dropout: m.encoder.dropout,
            head: head.to_string(),
            classes,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            adam_eps: cfg.adam_eps,
            epochs: cfg.epochs,
            max_len: cfg.max_len,
            augment_stride: 0,
            val_fraction: 0.0,
        }
    }

    /// Training configuration; `categories` supplies the classes when none
    /// are configured.
    pub fn to_config(&self, seed: u64, categories: &[String]) -> CliResult<TrainConfig> {
        let mut model = ModelConfig::default();
        model.embedding.kind = match self.embedding.as_str() {
            "gcn" => EmbeddingKind::Gcn,
            "fixed" => EmbeddingKind::Fixed,
            other => {
                return Err(Failure::usage(format!(
                    "embedding must be gcn or fixed, got {other:?}"
                )))
            }
        };
        model.embedding.width = self.width;
        model.embedding.gcn_layers = self.gcn_layers;
        model.embedding.gcn_hidden = self.gcn_hidden;
        model.embedding.fixed_width = self.fixed_width;
        model.encoder.layers = self.encoder_layers;
        // the encoder consumes whatever the embedding path emits
        model.encoder.width = model.embedding.output_width();
        model.encoder.heads = self.heads;
        model.encoder.ffn = self.ffn;
        model.encoder.dropout = self.dropout;
        model.head = match self.head.as_str() {
            "crf" => HeadConfig::Crf,
            "classification" => {
                let classes: Vec<String> = if self.classes.trim().is_empty() {
                    categories.to_vec()
                } else {
                    self.classes
                        .split(',')
                        .map(|c| c.trim().to_string())
                        .collect()
                };
                HeadConfig::Classification { classes }
            }
            other => {
                return Err(Failure::usage(format!(
                    "head must be crf or classification, got {other:?}"
                )))
            }
        };
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Failure::usage(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        let cfg = TrainConfig {
            model,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            epochs: self.epochs,
            seed,
            max_len: self.max_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Effective settings echoed next to an artifact.
#[derive(Debug, Serialize)]
pub struct Provenance<'a, C: Serialize> {
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a C,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<&'a str, String>,
}

pub fn write_sidecar<C: Serialize>(artifact: &Path, meta: &Provenance<C>) -> CliResult<()> {
    let path = sidecar_path(artifact);
    let text = serde_json::to_string_pretty(meta)? + "\n";
    std::fs::write(&path, text).map_err(|e| crate::failure::io_error(&path, e))
}

pub fn sidecar_path(artifact: &Path) -> std::path::PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use airtime::dataset::SynthConfig;

    #[test]
    fn pairs_skip_comments_and_blank_lines() {
        let p = parse_pairs("# header\n\nepochs = 5  # inline\nlr=0.01\n", "cfg").unwrap();
        assert_eq!(
            p,
            vec![("epochs".into(), "5".into()), ("lr".into(), "0.01".into())]
        );
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        assert!(matches!(
            parse_pairs("a = 1\na = 2\n", "cfg"),
            Err(Failure::Usage(_))
        ));
        assert!(matches!(
            parse_pairs("just words\n", "cfg"),
            Err(Failure::Usage(_))
        ));
    }

    #[test]
    fn overrides_win_and_types_follow_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "videos = 10\nnoise = 2\n").unwrap();
        let cfg = load(&SynthConfig::default(), Some(&path), &["videos=12".into()]).unwrap();
        assert_eq!(cfg.videos, 12);
        assert_eq!(cfg.noise, 2.0);
        assert_eq!(cfg.fps, SynthConfig::default().fps);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let err = load(&SynthConfig::default(), None, &["vidoes=3".into()]).unwrap_err();
        assert!(
            matches!(&err, Failure::Usage(m) if m.contains("vidoes")),
            "{err}"
        );
        assert!(matches!(
            load(&SynthConfig::default(), None, &["videos=-1".into()]),
            Err(Failure::Usage(_))
        ));
        assert!(matches!(
            load(&SynthConfig::default(), None, &["noise=abc".into()]),
            Err(Failure::Usage(_))
        ));
    }

    #[test]
    fn train_settings_round_trip_through_config() {
        let s = TrainSettings::default();
        let cfg = s.to_config(3, &[]).unwrap();
        assert_eq!(
            cfg,
            TrainConfig {
                seed: 3,
                ..TrainConfig::default()
            }
        );
        assert_eq!(TrainSettings::from_config(&cfg), s);
    }

    #[test]
    fn classification_classes_default_to_categories() {
        let s = TrainSettings {
            head: "classification".into(),
            ..TrainSettings::default()
        };
        let cfg = s.to_config(0, &["a".into(), "b".into()]).unwrap();
        assert_eq!(
            cfg.model.class_names().unwrap(),
            ["a".to_string(), "b".to_string()]
        );
        let s = TrainSettings {
            head: "classification".into(),
            classes: "x, y ,z".into(),
            ..TrainSettings::default()
        };
        assert_eq!(
            s.to_config(0, &[])
                .unwrap()
                .model
                .class_names()
                .unwrap()
                .len(),
            3
        );
    }

    #[test]
    fn invalid_model_settings_are_usage_errors() {
        let s = TrainSettings {
            heads: 3,
            ..TrainSettings::default()
        };
        assert!(matches!(s.to_config(0, &[]), Err(Failure::Usage(_))));
        let s = TrainSettings {
            head: "svm".into(),
            ..TrainSettings::default()
        };
        assert!(matches!(s.to_config(0, &[]), Err(Failure::Usage(_))));
    }
}
