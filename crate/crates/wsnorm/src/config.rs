//! Flat INI-style config files.
//!
//! ```text
//! # comment (also ;)
//! top_level_key = value
//!
//! [train]
//! lr = 0.1
//! epochs = 10
//! ```
//!
//! One level of sections, no quoting, no escapes; values are trimmed raw
//! strings. Lookup keys are `section.key`, or the bare key name for entries
//! above the first section header. Duplicate keys are an error rather than
//! a silent override — the file should say what it means once.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    sections: Vec<Section>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Section {
    name: String,
    entries: Vec<(String, String)>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-'))
}

impl Config {
    pub fn new() -> Config {
        Config::default()
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner.strip_suffix(']').ok_or_else(|| {
                    Error::Parse(format!("config line {lineno}: unterminated section header"))
                })?;
                if !valid_name(name) {
                    return Err(Error::Parse(format!(
                        "config line {lineno}: bad section name {name:?}"
                    )));
                }
                current = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!(
                    "config line {lineno}: expected `key = value`, got {line:?}"
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !valid_name(key) {
                return Err(Error::Parse(format!(
                    "config line {lineno}: bad key {key:?}"
                )));
            }
            let full = join_key(&current, key);
            if cfg.get(&full).is_some() {
                return Err(Error::Parse(format!(
                    "config line {lineno}: duplicate key {full:?}"
                )));
            }
            cfg.insert(&current, key, value);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Looks up `section.key`, or a bare top-level key.
    pub fn get(&self, key: &str) -> Option<&str> {
        let (section, name) = split_key(key);
        self.sections
            .iter()
            .find(|s| s.name == section)?
            .entries
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    /// Inserts or overwrites; this is how command-line flags take precedence
    /// over file values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, name) = split_key(key);
        if !(section.is_empty() || valid_name(section)) || !valid_name(name) {
            return Err(Error::InvalidArgument(format!("bad config key {key:?}")));
        }
        if value.contains(['\n', '\r']) {
            return Err(Error::InvalidArgument(format!(
                "config value for {key:?} contains a newline"
            )));
        }
        if let Some(sec) = self.sections.iter_mut().find(|s| s.name == section) {
            if let Some(entry) = sec.entries.iter_mut().find(|(k, _)| k == name) {
                entry.1 = value.to_string();
                return Ok(());
            }
        }
        self.insert(section, name, value);
        Ok(())
    }

    fn insert(&mut self, section: &str, key: &str, value: &str) {
        if let Some(sec) = self.sections.iter_mut().find(|s| s.name == section) {
            sec.entries.push((key.to_string(), value.to_string()));
            return;
        }
        self.sections.push(Section {
            name: section.to_string(),
            entries: vec![(key.to_string(), value.to_string())],
        });
    }

    pub fn keys(&self) -> Vec<String> {
        let mut out = Vec::new();
        for sec in &self.sections {
            for (k, _) in &sec.entries {
                out.push(join_key(&sec.name, k));
            }
        }
        out
    }

    /// Serializes back to the file syntax; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        // The unnamed section must come first or its keys change meaning.
        let (top, named): (Vec<_>, Vec<_>) =
            self.sections.iter().partition(|s| s.name.is_empty());
        for sec in top.into_iter().chain(named) {
            if !sec.name.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", sec.name));
            }
            for (k, v) in &sec.entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    fn typed<T>(&self, key: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => parse(raw).map(Some).ok_or_else(|| {
                Error::Parse(format!("config key {key:?}: {raw:?} is not {what}"))
            }),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.typed(key, "a number", |s| s.parse().ok())
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.typed(key, "an unsigned integer", |s| s.parse().ok())
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.typed(key, "an unsigned integer", |s| s.parse().ok())
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.typed(key, "true or false", |s| match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    /// Comma-separated list of unsigned integers, e.g. decay epochs `30,60`.
    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.typed(key, "a comma-separated integer list", |s| {
            if s.is_empty() {
                return Some(Vec::new());
            }
            s.split(',').map(|p| p.trim().parse().ok()).collect()
        })
    }
}

fn split_key(key: &str) -> (&str, &str) {
    match key.split_once('.') {
        Some((section, name)) => (section, name),
        None => ("", key),
    }
}

fn join_key(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}
