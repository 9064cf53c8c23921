//! `key = value` experiment manifests. Keys are flag names without the
//! leading dashes; `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Keys a config file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "cores",
    "memory-gb",
    "bandwidth-mbps",
    "bandwidth-curve",
    "cpu-model",
    "seed",
    "seconds",
    "elements",
    "warmup",
    "threshold",
    "min-seconds",
    "max-seconds",
    "interval",
    "steps",
    "trace-seconds",
    "preset",
    "out",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
    origin: String,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                context: format!("{origin}:{}", i + 1),
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(parse_err(format!("unknown key `{key}`")));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Config {
            values,
            origin: origin.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| Error::Parse {
                    context: format!("{} key `{key}`", self.origin),
                    message: e.to_string(),
                })
            })
            .transpose()
    }

    /// `flag`, else the config value for `key`, else `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    /// Like [`Config::resolve`] for settings with no default.
    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = Config::parse("# experiment\ncores = 8  # half the box\n\nseed=3\n", "t").unwrap();
        assert_eq!(c.get::<f64>("cores").unwrap(), Some(8.0));
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(3));
        assert_eq!(c.get::<u64>("steps").unwrap(), None);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Config::parse("cores 8", "t").is_err());
        assert!(Config::parse("colors = 8", "t").is_err());
        let c = Config::parse("cores = many", "t").unwrap();
        assert!(c.get::<f64>("cores").is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let c = Config::parse("cores = 8", "t").unwrap();
        assert_eq!(c.resolve(Some(4.0), "cores", 16.0).unwrap(), 4.0);
        assert_eq!(c.resolve(None, "cores", 16.0).unwrap(), 8.0);
        assert_eq!(
            Config::default().resolve(None, "cores", 16.0).unwrap(),
            16.0
        );
    }
}
