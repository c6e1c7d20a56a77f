//! JSON artifact helpers. Every artifact carries a `format_version`; a
//! mismatch fails at load time.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub trait Versioned {
    fn format_version(&self) -> u32;
}

#[derive(Deserialize)]
struct Probe {
    format_version: Option<u32>,
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut text =
        serde_json::to_string_pretty(value).expect("artifact types serialize infallibly");
    text.push('\n');
    text
}

pub fn from_json<T: DeserializeOwned + Versioned>(text: &str, context: &str) -> Result<T> {
    let probe: Probe = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
    let found = probe.format_version.unwrap_or(0);
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            path: context.to_string(),
            found,
            expected: FORMAT_VERSION,
        });
    }
    let value: T = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
    debug_assert_eq!(value.format_version(), FORMAT_VERSION);
    Ok(value)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
