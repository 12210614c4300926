//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{NmtError, Result};

/// Every recognised key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "1234"),
    // model
    ("emb", "512"),
    ("hid", "1024"),
    ("init-std", "0.01"),
    // data
    ("train-src", ""),
    ("train-tgt", ""),
    ("valid-src", ""),
    ("valid-tgt", ""),
    ("src-vocab", ""),
    ("tgt-vocab", ""),
    ("vocab-size", "30000"),
    ("max-len", "50"),
    ("task", ""),
    ("task-vocab", "20"),
    ("task-train", "2000"),
    ("task-valid", "200"),
    ("task-min-len", "3"),
    ("task-max-len", "8"),
    ("n", "1000"),
    ("gradcheck-seed", "5"),
    // training
    ("objective", "base"),
    ("batch-size", "32"),
    ("epochs", "10"),
    ("dropout", "0"),
    ("clip", "1.0"),
    ("rho", "0.95"),
    ("eps", "1e-6"),
    ("patience", "3"),
    ("pretrain", ""),
    ("finetune-all", "true"),
    ("out-dir", "run"),
    ("overwrite", "false"),
    // decoding
    ("checkpoint", ""),
    ("ensemble", ""),
    ("input", ""),
    ("output", ""),
    ("beam", "5"),
    ("vocab-n", "0"),
    ("decode-max-len", "0"),
    ("timing", ""),
    ("heatmap", ""),
    // evaluation
    ("hyp", ""),
    ("ref", ""),
    ("top-n", "10,100,1000,5000,10000"),
    ("eval.include-eos", "false"),
];

/// Resolved configuration: defaults, then a config file, then
/// command-line overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(NmtError::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                NmtError::Config(format!("{origin}:{}: expected `key = value`", n + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| NmtError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| NmtError::file(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `--key value [value…]` arguments. Several values are joined
    /// with commas; a bare `--flag` sets `true`.
    pub fn apply_args(&mut self, args: &[String]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let key = args[i]
                .strip_prefix("--")
                .ok_or_else(|| NmtError::Config(format!("expected `--key`, got `{}`", args[i])))?;
            let (key, inline) = match key.split_once('=') {
                Some((k, v)) => (k, Some(v.to_string())),
                None => (key, None),
            };
            i += 1;
            let value = match inline {
                Some(v) => v,
                None => {
                    let mut vals = Vec::new();
                    while i < args.len() && !is_key(&args[i]) {
                        vals.push(args[i].clone());
                        i += 1;
                    }
                    if vals.is_empty() {
                        "true".to_string()
                    } else {
                        vals.join(",")
                    }
                }
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no config key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key);
        v.parse()
            .map_err(|_| NmtError::Config(format!("`{key}` has invalid value `{v}`")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key).to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(NmtError::Config(format!("`{key}` expects true/false, got `{v}`"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| NmtError::Config(format!("`--{key}` is required")))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key)
            .iter()
            .map(|v| {
                v.parse()
                    .map_err(|_| NmtError::Config(format!("`{key}` has invalid entry `{v}`")))
            })
            .collect()
    }

    /// One `key = value` line per key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

fn is_key(arg: &str) -> bool {
    arg.len() > 2 && arg.starts_with("--")
}
