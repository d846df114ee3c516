//! Loading configuration structs from TOML or JSON files.

use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
}

impl ConfigError {
    pub fn field(field: &'static str, message: impl Into<String>) -> Self {
        ConfigError::Field {
            field,
            message: message.into(),
        }
    }
}

/// Parses `text` as JSON when it looks like a JSON object, TOML otherwise.
pub fn parse_str<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    let parse_err = |message: String| ConfigError::Parse {
        path: origin.to_string(),
        message,
    };
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))
    } else {
        toml::from_str(text).map_err(|e| parse_err(e.to_string()))
    }
}

/// Reads a TOML (`.toml`) or JSON (anything else) file.
pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, ConfigError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: shown.clone(),
        source,
    })?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: shown,
            message: e.to_string(),
        })
    } else {
        parse_str(&text, &shown)
    }
}
