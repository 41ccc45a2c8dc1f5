//! Versioned `key = value` text documents used for checkpoints.
//!
//! ```text
//! format = window-model
//! version = 1
//! features = 12
//! theta = 0.5 -1.25 3e-7
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! parse → write reproduces a written document byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvDocument {
    entries: Vec<(String, String)>,
    source_name: String,
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_f64_list(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
    }
    out
}

impl KvDocument {
    /// Starts a document with its `format` and `version` header.
    pub fn new(format: &str, version: u32) -> Self {
        let mut doc = KvDocument::default();
        doc.push("format", format);
        doc.push("version", version.to_string());
        doc
    }

    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn push_f64(&mut self, key: &str, value: f64) {
        self.push(key, fmt_f64(value));
    }

    pub fn push_f64_list(&mut self, key: &str, values: &[f64]) {
        self.push(key, fmt_f64_list(values));
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut doc = KvDocument {
            entries: Vec::new(),
            source_name: source_name.to_string(),
        };
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (k, v) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::parse(source_name, i + 1, "expected `key = value`"))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::parse(source_name, i + 1, "empty key"));
            }
            if doc.entries.iter().any(|(existing, _)| existing == key) {
                return Err(Error::parse(source_name, i + 1, format!("duplicate key `{key}`")));
            }
            doc.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        KvDocument::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    /// Checks the `format`/`version` header.
    pub fn expect_header(&self, format: &str, version: u32) -> Result<()> {
        let found = self.get("format")?;
        if found != format {
            return Err(self.error(format!("expected format `{format}`, found `{found}`")));
        }
        let v: u32 = self.get_parsed("version")?;
        if v != version {
            return Err(self.error(format!("unsupported {format} version {v} (expected {version})")));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| self.error(format!("missing key `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| self.error(format!("cannot parse `{key}` value `{raw}`")))
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get(key)?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| self.error(format!("bad number `{tok}` in `{key}`")))
            })
            .collect()
    }

    pub fn get_f64_list_len(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.get_f64_list(key)?;
        if v.len() != len {
            return Err(self.error(format!("`{key}` has {} values, expected {len}", v.len())));
        }
        Ok(v)
    }

    fn error(&self, msg: String) -> Error {
        // Lookup errors are not tied to a single line.
        Error::parse(self.source_name.clone(), 0, msg)
    }
}

impl std::fmt::Display for KvDocument {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
