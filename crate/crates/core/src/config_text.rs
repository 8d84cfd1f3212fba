//! Line-oriented `key = value` configuration text with `#` comments.

use std::str::FromStr;

use crate::error::{Error, Result};

/// One `key = value` entry with its 1-based source line.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, reason: format!("expected `key = value`, got {content:?}") })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse { line, reason: "empty key".into() });
        }
        out.push(Entry { line, key: key.to_string(), value: value.trim().to_string() });
    }
    Ok(out)
}

pub fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses a value, reporting the key on failure.
pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
}

pub fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// A configuration section that recognises a fixed key set.
pub trait ConfigKeys {
    /// Applies one entry; `Ok(false)` when the key is not part of this section.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(String, String)>;
}

/// Applies every entry to the first section that accepts it; unknown keys are errors.
pub fn apply_entries(entries: &[Entry], sections: &mut [&mut dyn ConfigKeys]) -> Result<()> {
    'next: for e in entries {
        for s in sections.iter_mut() {
            if s.set(&e.key, &e.value).map_err(|err| Error::Parse { line: e.line, reason: err.to_string() })? {
                continue 'next;
            }
        }
        return Err(Error::Parse { line: e.line, reason: format!("unknown key {:?}", e.key) });
    }
    Ok(())
}
