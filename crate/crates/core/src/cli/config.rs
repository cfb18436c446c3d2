//! Flat `key = value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Command-line
//! values override the file, and keys a command does not know are errors.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::data::augment::AugmentConfig;
use crate::optim::{PlateauReducer, Rule};
use crate::train::TrainConfig;

/// Parses config text into ordered `(key, value)` pairs.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value, got '{line}'", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(format!("line {}: key '{k}' set twice", n + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Effective settings of one command: every known key with its value.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    command: &'static str,
    values: BTreeMap<&'static str, String>,
    order: Vec<&'static str>,
}

impl CliConfig {
    /// Merges `defaults`, then the file, then flags. Keys outside `defaults`
    /// are rejected.
    pub fn resolve(
        command: &'static str,
        defaults: &[(&'static str, String)],
        file: &[(String, String)],
        flags: &[(String, String)],
    ) -> Result<Self, String> {
        let mut values: BTreeMap<&'static str, String> =
            defaults.iter().map(|(k, v)| (*k, v.clone())).collect();
        for (k, v) in file.iter().chain(flags) {
            let Some((key, _)) = defaults.iter().find(|(d, _)| d == k) else {
                return Err(format!("unknown key '{k}' for '{command}'"));
            };
            values.insert(key, v.clone());
        }
        Ok(Self {
            command,
            values,
            order: defaults.iter().map(|(k, _)| *k).collect(),
        })
    }

    pub fn command(&self) -> &'static str {
        self.command
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key '{key}' not declared"))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let k = *self.order.iter().find(|k| **k == key).unwrap_or_else(|| panic!("key '{key}' not declared"));
        self.values.insert(k, value.into());
    }

    /// `None` when the value is empty.
    pub fn text(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V, String>
    where
        V::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| format!("bad value '{raw}' for {key}: {e}"))
    }

    /// Like [`get`](Self::get), with `none` mapping to `None`.
    pub fn get_opt<V: FromStr>(&self, key: &str) -> Result<Option<V>, String>
    where
        V::Err: std::fmt::Display,
    {
        if self.raw(key) == "none" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Manifest text. Feeding it back through `--config` reproduces the run.
    pub fn render(&self) -> String {
        let mut out = format!("# leafnet {} run manifest\n", self.command);
        for k in &self.order {
            out.push_str(&format!("{k} = {}\n", self.values[k]));
        }
        out
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> + '_ {
        self.order.iter().map(|k| (*k, self.values[k].as_str()))
    }
}

/// Defaults for every training hyperparameter key.
pub fn training_defaults(base: &TrainConfig) -> Vec<(&'static str, String)> {
    let (momentum, beta1, beta2, eps) = match base.optimizer {
        Rule::SgdMomentum { momentum } => (momentum, 0.9, 0.999, 1e-8),
        Rule::AdamLike { beta1, beta2, eps } => (0.9, beta1, beta2, eps),
    };
    let plateau = base.plateau.unwrap_or_default();
    let a = &base.augment;
    vec![
        ("seed", base.seed.to_string()),
        ("max_epochs", base.max_epochs.to_string()),
        ("batch_size", base.batch_size.to_string()),
        ("val_fraction", base.val_fraction.to_string()),
        ("early_stop_patience", base.early_stop_patience.map_or("none".into(), |p| p.to_string())),
        ("restore_best", base.restore_best.to_string()),
        ("plateau", base.plateau.is_some().to_string()),
        ("plateau_factor", plateau.factor.to_string()),
        ("plateau_patience", plateau.patience.to_string()),
        ("plateau_min_lr", plateau.min_lr.to_string()),
        ("plateau_min_delta", plateau.min_delta.to_string()),
        ("cosine", base.cosine.to_string()),
        ("optimizer", base.optimizer.name().to_string()),
        ("lr", base.base_lr.to_string()),
        ("momentum", momentum.to_string()),
        ("beta1", beta1.to_string()),
        ("beta2", beta2.to_string()),
        ("eps", eps.to_string()),
        ("shuffle", base.shuffle.to_string()),
        ("prefetch_chunk", base.prefetch_chunk.to_string()),
        ("augment", a.enabled.to_string()),
        ("rotation_deg", a.rotation_deg.to_string()),
        ("flip_prob", a.flip_prob.to_string()),
        ("zoom_min", a.zoom.0.to_string()),
        ("zoom_max", a.zoom.1.to_string()),
        ("contrast_min", a.contrast.0.to_string()),
        ("contrast_max", a.contrast.1.to_string()),
    ]
}

/// Builds a training configuration from the keys of [`training_defaults`].
pub fn training_config(c: &CliConfig) -> Result<TrainConfig, String> {
    let optimizer = match c.raw("optimizer") {
        "adam" => Rule::AdamLike {
            beta1: c.get("beta1")?,
            beta2: c.get("beta2")?,
            eps: c.get("eps")?,
        },
        "sgd" => Rule::SgdMomentum {
            momentum: c.get("momentum")?,
        },
        other => return Err(format!("unknown optimizer '{other}' (adam, sgd)")),
    };
    let plateau = c.get::<bool>("plateau")?.then_some(()).map(|_| -> Result<_, String> {
        let mut p = PlateauReducer::new(c.get("plateau_factor")?, c.get("plateau_patience")?, c.get("plateau_min_lr")?);
        p.min_delta = c.get("plateau_min_delta")?;
        Ok(p)
    });
    let cfg = TrainConfig {
        max_epochs: c.get("max_epochs")?,
        batch_size: c.get("batch_size")?,
        val_fraction: c.get("val_fraction")?,
        early_stop_patience: c.get_opt("early_stop_patience")?,
        restore_best: c.get("restore_best")?,
        plateau: plateau.transpose()?,
        cosine: c.get("cosine")?,
        optimizer,
        base_lr: c.get("lr")?,
        seed: c.get("seed")?,
        shuffle: c.get("shuffle")?,
        augment: AugmentConfig {
            enabled: c.get("augment")?,
            rotation_deg: c.get("rotation_deg")?,
            flip_prob: c.get("flip_prob")?,
            zoom: (c.get("zoom_min")?, c.get("zoom_max")?),
            contrast: (c.get("contrast_min")?, c.get("contrast_max")?),
        },
        prefetch_chunk: c.get("prefetch_chunk")?,
        checkpoint_path: None,
    };
    if cfg.prefetch_chunk == 0 {
        return Err("prefetch_chunk must be at least 1".into());
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let kv = parse_config("# header\n\nlr = 0.01  # inline\n  seed=3\n").unwrap();
        assert_eq!(kv, vec![("lr".into(), "0.01".into()), ("seed".into(), "3".into())]);
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(parse_config("lr 0.01").is_err());
        assert!(parse_config("= 3").is_err());
        assert!(parse_config("lr = 1\nlr = 2").is_err());
    }

    #[test]
    fn flags_override_file_and_unknown_keys_fail() {
        let defaults = training_defaults(&TrainConfig::baseline());
        let file = parse_config("lr = 0.5\nseed = 1").unwrap();
        let flags = vec![("seed".to_string(), "9".to_string())];
        let c = CliConfig::resolve("train", &defaults, &file, &flags).unwrap();
        assert_eq!(c.raw("lr"), "0.5");
        assert_eq!(c.raw("seed"), "9");
        let bad = parse_config("learning_rate = 1").unwrap();
        assert!(CliConfig::resolve("train", &defaults, &bad, &[]).is_err());
    }

    #[test]
    fn defaults_round_trip_to_the_same_config() {
        for base in [TrainConfig::baseline(), TrainConfig::fine_tune()] {
            let c = CliConfig::resolve("train", &training_defaults(&base), &[], &[]).unwrap();
            assert_eq!(training_config(&c).unwrap(), base);
        }
    }

    #[test]
    fn rendered_manifest_parses_back() {
        let defaults = training_defaults(&TrainConfig::fine_tune());
        let c = CliConfig::resolve("finetune", &defaults, &[], &[("lr".into(), "0.003".into())]).unwrap();
        let again = CliConfig::resolve("finetune", &defaults, &parse_config(&c.render()).unwrap(), &[]).unwrap();
        assert_eq!(c, again);
    }
}
