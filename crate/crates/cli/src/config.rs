//! Run configuration: file loading, `key=value` overrides and key listing.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use s3g_core::{Error, Result};

/// Parses a TOML document, or JSON when the file ends in `.json`.
pub fn parse_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Applies `dotted.key=value` overrides. Values are read as JSON where
/// possible (`3`, `true`, `[1, 2]`) and as strings otherwise. Keys that do
/// not exist in the schema are rejected.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> Result<T> {
    let mut doc = serde_json::to_value(base)?;
    let known = config_keys(base);
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        let key = key.trim();
        if !known.iter().any(|k| k == key) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
        }
        *slot = value;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}

/// Every leaf key of `value`'s serialized form, dotted, in schema order.
pub fn config_keys<T: Serialize>(value: &T) -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(value).unwrap_or(Value::Null), &mut out);
    out
}

/// Help text listing each key with its default.
pub fn keys_help<T: Serialize>(title: &str, value: &T) -> String {
    let doc = serde_json::to_value(value).unwrap_or(Value::Null);
    let mut s = format!("{title}:\n");
    for key in config_keys(value) {
        let mut v = &doc;
        for part in key.split('.') {
            v = &v[part];
        }
        s.push_str(&format!("  {key} = {v}\n"));
    }
    s
}
