//! Flat `key = value` configuration with layered overrides.
//!
//! Keys use section prefixes (`decoder.layers`, `matcher.delta`, ...). Each
//! subsystem pulls its own keys out of the map; whatever remains at the end
//! is unknown and rejected, so typos fail loudly instead of silently using
//! defaults.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// An ordered key-value store; later inserts override earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// ignored; keys repeat freely with last-write-wins.
    pub fn load_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{origin}:{}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("{origin}:{}: empty key", lineno + 1)));
            }
            self.values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        self.load_str(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override (e.g. from the command line).
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        self.load_str(pair, "override")
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Removes and returns the raw value for `key`.
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    /// Removes `key` and parses it as `T`.
    pub fn take_parse<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::config(format!("config key '{key}': cannot parse '{raw}': {e}"))
            }),
        }
    }

    /// Overwrites `*slot` when `key` is present; the usual way a config
    /// struct consumes its section.
    pub fn apply<T>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take_parse::<T>(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails if any key was never consumed — the unknown-key guard.
    pub fn ensure_consumed(&self) -> Result<()> {
        if self.values.is_empty() {
            return Ok(());
        }
        let leftovers: Vec<&str> = self.values.keys().map(String::as_str).collect();
        Err(Error::config(format!("unknown config keys: {}", leftovers.join(", "))))
    }

    /// Stable digest over the *current* contents, for run provenance.
    pub fn content_hash(&self) -> String {
        let mut desc = String::new();
        for (k, v) in &self.values {
            desc.push_str(k);
            desc.push('=');
            desc.push_str(v);
            desc.push('\n');
        }
        crate::util::sha256_hex(desc.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let mut kv = KvConfig::new();
        kv.load_str(
            "# a comment\n\n decoder.layers = 2 \ndecoder.dim=128\nmatcher.delta = 0.04\n",
            "test",
        )
        .unwrap();
        assert_eq!(kv.take_parse::<usize>("decoder.layers").unwrap(), Some(2));
        assert_eq!(kv.take_parse::<usize>("decoder.dim").unwrap(), Some(128));
        assert_eq!(kv.take_parse::<f64>("matcher.delta").unwrap(), Some(0.04));
        kv.ensure_consumed().unwrap();
    }

    #[test]
    fn later_layers_override_earlier() {
        let mut kv = KvConfig::new();
        kv.load_str("a.x = 1\na.y = 2", "base").unwrap();
        kv.load_str("a.x = 10", "override-file").unwrap();
        kv.set_pair("a.y=20").unwrap();
        assert_eq!(kv.take_parse::<i32>("a.x").unwrap(), Some(10));
        assert_eq!(kv.take_parse::<i32>("a.y").unwrap(), Some(20));
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let mut kv = KvConfig::new();
        kv.load_str("decoder.layers = 2\ndecoder.lyaers = 3", "test").unwrap();
        let mut layers = 0usize;
        kv.apply("decoder.layers", &mut layers).unwrap();
        assert_eq!(layers, 2);
        let err = kv.ensure_consumed().unwrap_err();
        assert!(err.to_string().contains("decoder.lyaers"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut kv = KvConfig::new();
        kv.load_str("decoder.layers = two", "test").unwrap();
        let err = kv.take_parse::<usize>("decoder.layers").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("decoder.layers") && msg.contains("two"), "{msg}");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let mut kv = KvConfig::new();
        assert!(kv.load_str("just-a-word", "test").is_err());
        assert!(kv.load_str("= value", "test").is_err());
    }

    #[test]
    fn file_layering_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, "probe.noise = 0.1\n").unwrap();
        let mut kv = KvConfig::new();
        kv.load_file(&p).unwrap();
        let h1 = kv.content_hash();
        kv.set_pair("probe.noise=0.5").unwrap();
        assert_ne!(kv.content_hash(), h1);
        assert_eq!(kv.take_parse::<f64>("probe.noise").unwrap(), Some(0.5));
    }
}
