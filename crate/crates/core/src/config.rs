//! `key = value` configuration files for the command-line tool.
//!
//! Each key names a command-line flag without its leading dashes
//! (underscores and dashes are interchangeable). Blank lines and lines
//! starting with `#` are ignored. Flags given on the command line override
//! values from the file.

use std::path::Path;

use crate::error::{Error, Result};

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_config(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidParameter(format!(
                "config line {}: expected `key = value`, got `{line}`",
                i + 1
            )));
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::InvalidParameter(format!("config line {}: bad key `{key}`", i + 1)));
        }
        entries.push(ConfigEntry { key, value: value.trim().to_string(), line: i + 1 });
    }
    Ok(entries)
}

pub fn load_config(path: &Path) -> Result<Vec<ConfigEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Turns entries into flag tokens. `is_switch` reports whether a key is a
/// value-less flag; switches accept `true`/`false`, and `false` drops them.
pub fn entries_to_args(entries: &[ConfigEntry], is_switch: impl Fn(&str) -> bool) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for e in entries {
        if is_switch(&e.key) {
            match e.value.as_str() {
                "true" | "1" | "yes" => args.push(format!("--{}", e.key)),
                "false" | "0" | "no" => {}
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "config line {}: `{}` expects true or false, got `{other}`",
                        e.line, e.key
                    )))
                }
            }
        } else {
            args.push(format!("--{}", e.key));
            args.push(e.value.clone());
        }
    }
    Ok(args)
}
