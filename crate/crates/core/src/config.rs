//! Run configuration: a TOML document with `[dataset]`, `[model]` and
//! `[trainer]` sections plus a top-level `seed`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::train::SgdConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "IMG_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: NetworkConfig,
    #[serde(default)]
    pub trainer: SgdConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Parses `text`, then applies `key.path=value` overrides whose values
    /// are TOML literals (a bare word is taken as a string).
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {item:?}")))?;
            let mut node = &mut table;
            for p in parts {
                node = node
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{p} in {key} is not a section")))?;
            }
            node.insert(last.to_string(), value);
        }
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, applies overrides and then `IMG_SEED`.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::parse_with_overrides(&text, overrides)?;
        config.apply_env()?;
        Ok(config)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.trainer.validate()
    }

    /// TOML text that parses back to an equal config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::ShiftMode;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.model.slice_shift_modes = Some([ShiftMode::Frozen, ShiftMode::Random, ShiftMode::Identity]);
        c.trainer.decay_epochs = vec![3, 5];
        assert_eq!(RunConfig::parse(&c.echo()).unwrap(), c);
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.echo()).unwrap(), c);
    }

    #[test]
    fn overrides_merge_into_sections() {
        let overrides = ["trainer.epochs=3".to_string(), "model.shift_mode=frozen".into(), "seed=11".into()];
        let c = RunConfig::parse_with_overrides("[trainer]\ndecay_epochs = [1]\n", &overrides).unwrap();
        assert_eq!((c.seed, c.trainer.epochs, c.model.shift_mode), (11, 3, ShiftMode::Frozen));
        assert!(RunConfig::parse_with_overrides("", &["trainer.nope=1".into()]).is_err());
        assert!(RunConfig::parse_with_overrides("", &["novalue".into()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[trainer]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::parse("colour = 1\n").is_err());
        let c = RunConfig::parse("seed = 4\n[trainer]\nepochs = 2\ndecay_epochs = []\n").unwrap();
        assert_eq!((c.seed, c.trainer.epochs), (4, 2));
    }
}
