//! Run manifests: the parameters and input digests behind a set of outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    /// File name only, so the digest does not depend on where inputs live.
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<InputDigest>,
    /// Hash of everything above; stamped into every output file.
    pub digest: String,
    pub started: String,
    pub finished: String,
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Current time, or `SOURCE_DATE_EPOCH` when set so reruns are reproducible.
fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok())
        .and_then(|s| DateTime::<Utc>::from_timestamp(s, 0));
    fixed
        .unwrap_or_else(Utc::now)
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            parameters: BTreeMap::new(),
            inputs: Vec::new(),
            digest: String::new(),
            started: timestamp(),
            finished: String::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.parameters.insert(key.to_string(), v);
        self.refresh();
        self
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> Result<&mut Self> {
        let path = path.as_ref();
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.inputs.push(InputDigest {
            name,
            sha256: file_digest(path)?,
        });
        self.refresh();
        Ok(self)
    }

    fn refresh(&mut self) {
        let body = serde_json::json!({
            "command": self.command,
            "tool_version": self.tool_version,
            "parameters": self.parameters,
            "inputs": self.inputs,
        });
        self.digest = sha256_hex(body.to_string().as_bytes());
    }

    /// Stamps the finish time and writes `manifest_<command>.json` into `dir`.
    pub fn write(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        self.finished = timestamp();
        let path = dir.as_ref().join(format!("manifest_{}.json", self.command));
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
