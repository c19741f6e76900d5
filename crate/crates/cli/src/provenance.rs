//! Versioned report envelopes carrying SHA-256 digests of their inputs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fitq::SCHEMA_VERSION;

pub fn digest(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document<T> {
    pub schema_version: u32,
    pub kind: String,
    /// Input role to content digest.
    pub inputs: BTreeMap<String, String>,
    pub body: T,
}

impl<T: Serialize> Document<T> {
    pub fn new(kind: &str, inputs: &Inputs, body: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            inputs: inputs.0.clone(),
            body,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Digests of the files a command read, keyed by role.
#[derive(Clone, Debug, Default)]
pub struct Inputs(BTreeMap<String, String>);

impl Inputs {
    pub fn add(&mut self, role: &str, bytes: &[u8]) {
        self.0.insert(role.to_string(), digest(bytes));
    }

    /// Reads `path`, records its digest under `role` and returns the text.
    pub fn read(&mut self, role: &str, path: &Path) -> Result<String> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {role} file {}", path.display()))?;
        self.add(role, text.as_bytes());
        Ok(text)
    }

    /// Reads a report written by another subcommand, checking its version and kind.
    pub fn read_document<T: DeserializeOwned>(&mut self, role: &str, path: &Path, kind: &str) -> Result<T> {
        let text = self.read(role, path)?;
        let head: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("{role} file {} is not JSON", path.display()))?;
        match head.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => bail!("{role} file {} has schema version {v}, expected {SCHEMA_VERSION}", path.display()),
            None => bail!("{role} file {} has no schema version", path.display()),
        }
        let doc: Document<T> =
            serde_json::from_value(head).with_context(|| format!("{role} file {} is malformed", path.display()))?;
        if doc.kind != kind {
            bail!("{role} file {} is a {} document, expected {kind}", path.display(), doc.kind);
        }
        Ok(doc.body)
    }
}
