//! Flat `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Command-line flags override
//! file entries; the fully resolved set is written next to each run's
//! outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gsmnet::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!("config line {}: expected key = value", i + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::validation(format!(
                    "config line {}: empty key",
                    i + 1
                )));
            }
            if c.entries
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::validation(format!(
                    "config line {}: duplicate key '{k}'",
                    i + 1
                )));
            }
        }
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Apply `key=value` overrides.
    pub fn apply(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::validation(format!(
                "unknown config key '{k}' (accepted: {})",
                allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::validation(format!("config key '{key}' = '{v}': {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.entries
            .get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::validation(format!("missing required setting '{key}'")))
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        gsmnet::io::write_atomic(path, &self.render())
    }
}

/// `dir/stem.resolved.conf` for an output file `dir/stem.ext`.
pub fn resolved_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.resolved.conf"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = Config::parse("# run\nepochs = 30\n\n lr=0.5 # fast\n").unwrap();
        assert_eq!(c.get::<usize>("epochs").unwrap(), Some(30));
        assert_eq!(c.get::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(c.get::<f64>("decay").unwrap(), None);
    }

    #[test]
    fn overrides_win_and_render_sorted() {
        let mut c = Config::parse("seed = 1\nepochs = 5").unwrap();
        c.apply(&["seed=9".into()]).unwrap();
        assert_eq!(c.render(), "epochs = 5\nseed = 9\n");
        assert_eq!(Config::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn malformed_input_is_a_validation_error() {
        assert!(Config::parse("epochs 5").is_err());
        assert!(Config::parse("a = 1\na = 2").is_err());
        let c = Config::parse("epochs = five").unwrap();
        assert!(matches!(
            c.get::<usize>("epochs"),
            Err(Error::Validation(_))
        ));
        assert!(c.check_keys(&["lr"]).is_err());
        assert!(c.check_keys(&["epochs"]).is_ok());
        assert!(Config::default().apply(&["novalue".into()]).is_err());
    }

    #[test]
    fn resolved_copy_sits_next_to_output() {
        assert_eq!(
            resolved_path(Path::new("out/d.json")),
            PathBuf::from("out/d.resolved.conf")
        );
    }
}
