//! Flat key-value configuration documents.
//!
//! Files are TOML. Nested tables flatten to dotted keys, so
//! `[dns]\nlr = 1e-3` and `"dns.lr" = 1e-3` are the same setting. Arrays
//! of scalars become comma-separated lists. Every key must be consumed by
//! the reader; leftovers are reported as unknown.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn scalar(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(b) => Some(b.to_string()),
        _ => None,
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, String>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::Array(items) => {
                let parts: Option<Vec<String>> = items.iter().map(scalar).collect();
                let parts = parts.ok_or_else(|| Error::Config(format!("`{key}`: only arrays of scalars are supported")))?;
                out.insert(key, parts.join(","));
            }
            other => {
                let v = scalar(other).ok_or_else(|| Error::Config(format!("`{key}`: unsupported value")))?;
                out.insert(key, v);
            }
        }
    }
    Ok(())
}

impl KeyValues {
    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        Self { map, used: RefCell::default() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map)?;
        Ok(Self::from_map(map))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            e => e,
        })
    }

    pub fn raw(&self) -> &BTreeMap<String, String> {
        &self.map
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.into());
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.str(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.str(key).map(|s| s.trim().parse::<T>().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.str(key).map(|s| s.split(',').map(|p| p.trim().parse::<T>().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{p}`")))).collect()).transpose()
    }

    /// Errors on keys no reader asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self.map.keys().filter(|k| !used.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}
