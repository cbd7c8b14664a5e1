use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

/// Overlay the flags given on the command line onto the optional JSON config
/// file. Flags left unset (null, false, empty list) fall through to the file.
pub fn resolve<T: Serialize + DeserializeOwned>(cli: &T, file: Option<&Path>) -> Result<T> {
    let mut merged = match file {
        None => Map::new(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            match serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("config {} is not JSON: {e}", path.display())))?
            {
                Value::Object(m) => m,
                _ => return Err(UsageError(format!("config {} must be a JSON object", path.display())).into()),
            }
        }
    };
    let Value::Object(flags) = serde_json::to_value(cli)? else {
        unreachable!("argument structs serialise to objects")
    };
    for (k, v) in flags {
        let unset = match &v {
            Value::Null | Value::Bool(false) => true,
            Value::Array(a) => a.is_empty(),
            _ => false,
        };
        if !unset || !merged.contains_key(&k) {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| UsageError(format!("bad config: {e}")).into())
}

/// Store the resolved config as `<out>.run.json`, or `<dir>/run.json` when
/// `out` is a directory.
pub fn record<T: Serialize>(resolved: &T, out: &Path) -> Result<PathBuf> {
    let path = if out.is_dir() {
        out.join("run.json")
    } else {
        let mut p = out.as_os_str().to_owned();
        p.push(".run.json");
        PathBuf::from(p)
    };
    let text = serde_json::to_string_pretty(resolved)?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn require<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| UsageError(format!("missing --{flag} (flag or config file)")).into())
}
