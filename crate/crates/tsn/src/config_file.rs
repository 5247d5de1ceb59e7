//! Line-oriented `key = value` settings files. `#` starts a comment;
//! blank lines are ignored.

use std::path::Path;

use tsn_core::ModelConfig;

use crate::error::{Result, TsnError};

/// Parses the pairs of a settings file, in file order.
pub fn parse_pairs(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected 'key = value', got '{line}'", n + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(format!("line {}: empty key or value", n + 1));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Applies a settings text on top of the defaults and validates the result.
pub fn parse_model_config(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut cfg = ModelConfig::default();
    for (k, v) in parse_pairs(text)? {
        cfg.set(&k, &v).map_err(|e| e.to_string())?;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| TsnError::io(path, e))?;
    parse_model_config(&text).map_err(|m| TsnError::format(path, m))
}

/// Every setting of `cfg`, one per line.
pub fn format_model_config(cfg: &ModelConfig) -> String {
    cfg.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
