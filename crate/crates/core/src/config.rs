//! Flat `key = value` configuration files with `#` comments and namespaced
//! keys (`train.`, `attack.`, `data.`, `eval.`). Unknown keys are rejected
//! by name; later assignments (including CLI overrides) win.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{content}`")]
    BadLine { line: usize, content: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing required config key `{0}`")]
    MissingKey(String),
    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("cannot read config file {path}: {message}")]
    Io { path: String, message: String },
}

/// An ordered key/value store with typed accessors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                content: raw.trim().to_string(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::BadLine { line: i + 1, content: raw.trim().to_string() });
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Reject any key outside the allowed schema, naming the offender.
    pub fn validate_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }

    fn parse_with<T, F>(&self, key: &str, expected: &'static str, f: F) -> Result<Option<T>, ConfigError>
    where
        F: FnOnce(&str) -> Option<T>,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => f(v).map(Some).ok_or_else(|| ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected,
            }),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.parse_with(key, "an unsigned integer", |v| v.parse().ok())
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        self.parse_with(key, "an unsigned integer", |v| v.parse().ok())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.parse_with(key, "a number", |v| {
            // allow simple fractions like 8/255
            if let Some((a, b)) = v.split_once('/') {
                let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
                if b != 0.0 {
                    return Some(a / b);
                }
                return None;
            }
            v.parse().ok()
        })
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        self.parse_with(key, "true or false", |v| match v {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        })
    }

    /// Serialize back to a `key = value` file body (sorted keys, LF).
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_namespaced_keys_and_comments() {
        let cfg = Config::parse_str(
            "# a comment\n\
             train.epochs = 10\n\
             attack.eps_linf = 8/255   # fraction syntax\n\
             \n\
             data.kind = rings\n",
        )
        .unwrap();
        assert_eq!(cfg.get_usize("train.epochs").unwrap(), Some(10));
        let eps = cfg.get_f64("attack.eps_linf").unwrap().unwrap();
        assert!((eps - 8.0 / 255.0).abs() < 1e-15);
        assert_eq!(cfg.get("data.kind"), Some("rings"));
        assert_eq!(cfg.get("train.lr"), None);
    }

    #[test]
    fn bad_lines_and_values_are_typed_errors() {
        let err = Config::parse_str("not a pair\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadLine { line: 1, .. }));
        let cfg = Config::parse_str("train.epochs = many\n").unwrap();
        let err = cfg.get_usize("train.epochs").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { .. }));
        assert!(err.to_string().contains("train.epochs"));
    }

    #[test]
    fn unknown_key_named_in_error() {
        let cfg = Config::parse_str("train.epochs = 3\ntrain.typo = 1\n").unwrap();
        let err = cfg.validate_keys(&["train.epochs"]).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("train.typo".to_string()));
        assert!(err.to_string().contains("train.typo"));
    }

    #[test]
    fn overrides_win_and_round_trip() {
        let mut cfg = Config::parse_str("train.epochs = 3\n").unwrap();
        cfg.set("train.epochs", "7");
        assert_eq!(cfg.get_usize("train.epochs").unwrap(), Some(7));
        let text = cfg.to_file_string();
        let cfg2 = Config::parse_str(&text).unwrap();
        assert_eq!(cfg, cfg2);
    }
}
