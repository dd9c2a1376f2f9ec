use std::fs;
use std::path::Path;

use qsep_core::model::{emit_config, load_config_value, LoadedConfig};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Reads the config, applies `key=value` overrides, then validates.
pub fn load(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<(LoadedConfig, String), CliError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            CliError::Usage(format!("config not found: {}", path.display()))
        }
        _ => CliError::Usage(format!("cannot read config {}: {e}", path.display())),
    })?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config error: {e}")))?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("override `{o}` is not of the form key=value"))
        })?;
        set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
    }
    if let Some(s) = seed {
        set_path(&mut doc, "run.seed", Value::from(s))?;
    }
    let loaded = load_config_value(doc).map_err(|e| CliError::Usage(e.to_string()))?;
    let hash = config_hash(&loaded);
    Ok((loaded, hash))
}

/// SHA-256 of the canonical form of the effective configuration.
pub fn config_hash(cfg: &LoadedConfig) -> String {
    hex::encode(Sha256::digest(emit_config(&cfg.document).as_bytes()))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("invalid override key `{key}`")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!(
                "override `{key}`: `{part}` is not inside an object"
            ))
        })?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("override `{key}`: parent is not an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
