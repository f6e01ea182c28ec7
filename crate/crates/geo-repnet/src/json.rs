//! Canonical JSON: keys sorted, no insignificant whitespace.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn to_canonical<T: Serialize>(value: &T) -> Result<String> {
    // going through Value sorts object keys
    let v = serde_json::to_value(value).map_err(|e| Error::Json {
        context: "serialize".into(),
        source: e,
    })?;
    serde_json::to_string(&v).map_err(|e| Error::Json {
        context: "serialize".into(),
        source: e,
    })
}

pub fn from_str<T: DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Json {
        context: context.to_string(),
        source: e,
    })
}

pub fn write_canonical<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = to_canonical(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, &path.display().to_string())
}
