//! Flat `section.key = value` configuration with a fixed key set.
//!
//! Every key has a default, so a config file only lists what it changes.
//! Sweep descriptions add `sweep.axis.<key>` lines (values separated by
//! `|`); `sweep.seeds` lists the fine-tune seeds of every arm.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every recognized key with its default value. An empty default means
/// "unset".
pub const DEFAULTS: &[(&str, &str)] = &[
    ("pretrain_data.num_samples", "2000"),
    ("pretrain_data.image_size", "64"),
    ("pretrain_data.num_classes", "5"),
    ("pretrain_data.seed", "1"),
    ("pretrain_data.clutter_min", "1"),
    ("pretrain_data.clutter_max", "3"),
    ("pretrain_data.noise_free", "false"),
    ("finetune_data.num_samples", "1000"),
    ("finetune_data.val_samples", "200"),
    ("finetune_data.image_size", "64"),
    ("finetune_data.num_classes", "5"),
    ("finetune_data.seed", "2"),
    ("finetune_data.clutter_min", "1"),
    ("finetune_data.clutter_max", "3"),
    ("finetune_data.noise_free", "false"),
    ("model.encoder_widths", "16,32,64,128"),
    ("model.decoder_widths", "64,32,16,8"),
    ("model.decoder_width_multiplier", "1"),
    ("model.bottleneck_attention", "false"),
    ("encoder.epochs", "20"),
    ("encoder.batch_size", "32"),
    ("encoder.lr", "0.002"),
    ("encoder.weight_decay", "0.0001"),
    ("encoder.crop_size", "64"),
    ("encoder.seed", "0"),
    ("denoise.mode", "ddep"),
    ("denoise.formulation", "scaled"),
    ("denoise.target", "noise"),
    ("denoise.magnitude", "sigma:0.22"),
    ("denoise.dataset", "pretrain"),
    ("denoise.dep_init", "scratch"),
    ("denoise.epochs", "30"),
    ("denoise.batch_size", "32"),
    ("denoise.lr", "0.001"),
    ("denoise.weight_decay", "0.0001"),
    ("denoise.crop_size", "64"),
    ("denoise.seed", "0"),
    ("denoise.init_from", ""),
    ("finetune.init", "ddep"),
    ("finetune.init_from", ""),
    ("finetune.label_fraction", "0.05"),
    ("finetune.epochs", "10"),
    ("finetune.steps_per_epoch", "0"),
    ("finetune.batch_size", "8"),
    ("finetune.lr", "0.001"),
    ("finetune.lr_grid", ""),
    ("finetune.weight_decay", "0.0001"),
    ("finetune.crop_size", "64"),
    ("finetune.seed", "0"),
    ("eval.scales", "1.0"),
    ("eval.flip", "false"),
    ("eval.patch_width", "0"),
    ("eval.batch_size", "50"),
    ("sweep.seeds", "0,1,2,3,4"),
    ("sweep.max_runs", "200"),
];

fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

fn is_sweep_key(key: &str) -> bool {
    key.strip_prefix("sweep.axis.").is_some_and(|k| is_known(k) && !k.starts_with("sweep."))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config { entries: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Config {
    /// Defaults overlaid with `text`. Lines are `key = value`; `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::BadValue { key: format!("line {}", n + 1), reason: format!("expected `key = value`, got `{line}`") });
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) && !is_sweep_key(key) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(Error::BadValue { key: assignment.to_string(), reason: "override must look like key=value".into() });
        };
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries.get(key).map(String::as_str).ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    /// `None` when the key is unset (empty).
    pub fn optional(&self, key: &str) -> Result<Option<&str>> {
        Ok(Some(self.get(key)?).filter(|v| !v.is_empty()))
    }

    pub fn parse_as<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key)?;
        raw.parse().map_err(|e: T::Err| Error::BadValue { key: key.to_string(), reason: format!("`{raw}`: {e}") })
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e: T::Err| Error::BadValue { key: key.to_string(), reason: format!("`{s}`: {e}") })
            })
            .collect()
    }

    pub fn bad(&self, key: &str, reason: impl Into<String>) -> Error {
        Error::BadValue { key: key.to_string(), reason: reason.into() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical text of the keys accepted by `select`, sorted.
    pub fn text_where(&self, mut select: impl FnMut(&str) -> bool) -> String {
        let mut s = String::new();
        for (k, v) in self.entries.iter().filter(|(k, _)| select(k)) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The whole configuration, without sweep keys.
    pub fn to_text(&self) -> String {
        self.text_where(|k| !k.starts_with("sweep."))
    }

    /// Sweep axes in key order: `(key, values)`.
    pub fn sweep_axes(&self) -> Vec<(String, Vec<String>)> {
        self.entries
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("sweep.axis.")
                    .map(|key| (key.to_string(), v.split('|').map(|s| s.trim().to_string()).collect()))
            })
            .collect()
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key_once() {
        let cfg = Config::default();
        assert_eq!(cfg.iter().count(), DEFAULTS.len());
        assert_eq!(cfg.get("denoise.magnitude").unwrap(), "sigma:0.22");
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = Config::parse("# a comment\nfinetune.lr = 3e-4  # trailing\n\nmodel.decoder_width_multiplier=2\n").unwrap();
        assert_eq!(cfg.parse_as::<f64>("finetune.lr").unwrap(), 3e-4);
        assert_eq!(cfg.parse_as::<usize>("model.decoder_width_multiplier").unwrap(), 2);
        assert_eq!(cfg.list::<usize>("model.encoder_widths").unwrap(), vec![16, 32, 64, 128]);
    }

    #[test]
    fn unknown_keys_named() {
        match Config::parse("finetune.lrr = 1") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "finetune.lrr"),
            other => panic!("{other:?}"),
        }
        let mut cfg = Config::default();
        assert!(matches!(cfg.apply_override("nope=1"), Err(Error::UnknownKey(_))));
        assert!(matches!(cfg.set("sweep.axis.nope", "1|2"), Err(Error::UnknownKey(_))));
        assert!(matches!(Config::parse("just words"), Err(Error::BadValue { .. })));
    }

    #[test]
    fn bad_values_named() {
        let cfg = Config::parse("encoder.epochs = many").unwrap();
        match cfg.parse_as::<usize>("encoder.epochs") {
            Err(Error::BadValue { key, .. }) => assert_eq!(key, "encoder.epochs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_axes_and_hash_stability() {
        let cfg = Config::parse("sweep.axis.finetune.label_fraction = 0.01 | 0.05\nsweep.seeds = 0,1").unwrap();
        assert_eq!(cfg.sweep_axes(), vec![("finetune.label_fraction".to_string(), vec!["0.01".to_string(), "0.05".to_string()])]);
        assert!(!cfg.to_text().contains("sweep."));
        let a = sha256_hex(&Config::parse("finetune.lr = 1\nencoder.lr = 2").unwrap().to_text());
        let b = sha256_hex(&Config::parse("encoder.lr = 2\nfinetune.lr = 1").unwrap().to_text());
        assert_eq!(a, b);
    }
}
