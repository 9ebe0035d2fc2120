//! `key = value` run configuration with `#` comments.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use dscnet_core::pipeline::{TrainConfig, CONFIG_KEYS};

use crate::CliError;

/// Keys the file accepts beyond the training configuration.
pub const FILE_ONLY_KEYS: [&str; 1] = ["out_dir"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            out_dir: PathBuf::from("."),
        }
    }
}

fn valid_keys() -> String {
    CONFIG_KEYS
        .iter()
        .chain(&FILE_ONLY_KEYS)
        .copied()
        .collect::<Vec<_>>()
        .join(", ")
}

impl RunConfigFile {
    /// Applies one assignment; unknown keys list every valid key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim();
        if key == "out_dir" {
            self.out_dir = PathBuf::from(value.trim());
            return Ok(());
        }
        if !CONFIG_KEYS.contains(&key) {
            return Err(CliError::Usage(format!(
                "unknown key {key:?}; valid keys: {}",
                valid_keys()
            )));
        }
        Ok(self.train.set(key, value.trim())?)
    }

    /// Parses `text` over the defaults. A key may appear once.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut out = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    n + 1
                ))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Usage(format!(
                    "line {}: duplicate key {key:?}",
                    n + 1
                )));
            }
            out.set(key, value)
                .map_err(|e| CliError::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key in file form; parsing it back gives `self`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.train.pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        out
    }
}
