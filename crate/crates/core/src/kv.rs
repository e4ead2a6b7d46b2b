//! Line-oriented `key=value` files, used for manifests and configs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    order: Vec<String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Manifest(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Manifest(format!("line {}: empty key", lineno + 1)));
            }
            if map.entries.contains_key(key) {
                return Err(Error::Manifest(format!("duplicate key {key:?}")));
            }
            map.insert(key, value.trim());
        }
        Ok(map)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        if self
            .entries
            .insert(key.to_string(), value.to_string())
            .is_none()
        {
            self.order.push(key.to_string());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Manifest(format!("missing key {key:?}")))
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.required(key)?;
        raw.parse()
            .map_err(|_| Error::Manifest(format!("bad value for {key:?}: {raw:?}")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse_required(key),
        }
    }

    pub fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.required(key)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Manifest(format!("bad list for {key:?}: {raw:?}")))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in &self.order {
            let _ = writeln!(out, "{key}={}", self.entries[key]);
        }
        out
    }
}
