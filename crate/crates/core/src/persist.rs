//! Versioned JSON envelopes for trained models.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    format_version: u32,
    model: T,
}

pub fn to_json<T: Serialize>(kind: &str, model: &T) -> Result<String> {
    let env = Envelope {
        format: kind.to_owned(),
        format_version: FORMAT_VERSION,
        model,
    };
    serde_json::to_string_pretty(&env).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
    if env.format != kind {
        return Err(Error::Serialization(format!(
            "expected a `{kind}` file, found `{}`",
            env.format
        )));
    }
    if env.format_version != FORMAT_VERSION {
        return Err(Error::Serialization(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            env.format_version
        )));
    }
    Ok(env.model)
}

pub fn save<T: Serialize>(kind: &str, model: &T, path: &Path) -> Result<()> {
    fs::write(path, to_json(kind, model)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<T> {
    from_json(kind, &fs::read_to_string(path)?)
}
