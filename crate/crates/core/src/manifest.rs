//! Run manifests: what went in, what came out, and content hashes of both.
//! Manifests carry no timestamps or host data so identical runs produce
//! identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_NAME: &str = "claimcheck";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of the compact JSON form of any serializable value.
pub fn sha256_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub config_hash: String,
    /// Logical input name → sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn new<C: Serialize + ?Sized>(command: &str, config: &C, seed: u64) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Manifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            seed,
            config_hash: sha256_json(&config)?,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, name: &str, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.insert(name.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, name: &str, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.insert(name.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.summary.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
