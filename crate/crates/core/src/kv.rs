//! Flat `key = value` configuration text.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored, keys
//! are unique. Values keep inner whitespace but are trimmed at both ends.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Config(format!("line {}: bad key {key:?}", i + 1)));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(map)
}

pub fn render(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parse `map[key]` if present.
pub fn get<T: FromStr>(map: &KvMap, key: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        })
        .transpose()
}

pub fn get_or<T: FromStr>(map: &KvMap, key: &str, default: T) -> Result<T> {
    Ok(get(map, key)?.unwrap_or(default))
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// Comma-separated list, items trimmed, empty items dropped.
pub fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}
