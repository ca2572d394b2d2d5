//! Flat `key = value` training configuration files.

use std::collections::BTreeMap;
use std::str::FromStr;

use rae_core::rae::RaeDims;
use rae_core::trainer::TrainConfig;
use rae_core::{Error, Result};

/// Settings that make up a training run before the channel count is known.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub rae_len: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub d_m: usize,
    pub tau: f64,
    pub max_segment_len: Option<usize>,
    pub epochs: usize,
    pub sequence_len: usize,
    pub step_size: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub evict_outliers: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let dims = RaeDims::default();
        let t = TrainConfig::default();
        TrainSettings {
            rae_len: dims.rae_len(),
            d_z: dims.d_z,
            d_h: dims.d_h,
            d_m: dims.d_m,
            tau: t.tau,
            max_segment_len: None,
            epochs: t.epochs,
            sequence_len: t.sequence_len,
            step_size: t.step_size,
            seed: t.seed,
            validation_fraction: t.validation_fraction,
            evict_outliers: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainSettings {
    /// Applies every entry of a config file on top of `self`.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_pairs(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "rae_len" => self.rae_len = parse(key, value)?,
            "d_z" => self.d_z = parse(key, value)?,
            "d_h" => self.d_h = parse(key, value)?,
            "d_m" => self.d_m = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "max_segment_len" => self.max_segment_len = Some(parse(key, value)?),
            "epochs" => self.epochs = parse(key, value)?,
            "sequence_len" => self.sequence_len = parse(key, value)?,
            "step_size" => self.step_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "evict_outliers" => self.evict_outliers = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_train_config(&self, n_channels: usize) -> Result<TrainConfig> {
        let dims = RaeDims::for_window(self.rae_len, n_channels, self.d_z, self.d_h, self.d_m);
        let cfg = TrainConfig {
            dims,
            tau: self.tau,
            max_segment_len: self.max_segment_len.unwrap_or(8 * self.rae_len),
            epochs: self.epochs,
            sequence_len: self.sequence_len,
            step_size: self.step_size,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1))
        })?;
        let key = key.trim().replace('-', "_");
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key:?}",
                i + 1
            )));
        }
    }
    Ok(out)
}
