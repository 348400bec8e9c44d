use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

/// Key/value settings of one subcommand. Only keys with a declared default
/// are accepted; an empty default marks a key that has no value unless set.
#[derive(Clone, Debug)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn new(command: &'static str, defaults: &[(&'static str, &str)]) -> Self {
        Self {
            command,
            values: defaults.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }

    /// Adds a key with its default.
    pub fn declare(&mut self, key: &'static str, default: &str) {
        self.values.insert(key, default.to_string());
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (&k, _) = self
            .values
            .get_key_value(key)
            .ok_or_else(|| CliError::Usage(format!("unknown key {key:?} for {}", self.command)))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value` lines of `path`; blank lines and `#` comments are
    /// skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config {} line {}: expected key=value",
                    path.display(),
                    i + 1
                ))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {p:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a {} setting", self.command))
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| CliError::Usage(format!("{key}={v:?}: {e}")))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.is_set(key) {
            self.parse(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf, CliError> {
        if self.is_set(key) {
            Ok(PathBuf::from(self.raw(key)))
        } else {
            Err(CliError::Usage(format!("{} needs {key}", self.command)))
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {} settings\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Writes every resolved setting to `dir/resolved_config.txt`.
    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<()> {
        fs::write(dir.join(RESOLVED_CONFIG), self.to_text())?;
        Ok(())
    }
}
