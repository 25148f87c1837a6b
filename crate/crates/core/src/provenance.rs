//! Provenance stamps embedded in every pipeline output.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical run configuration.
    pub config_hash: String,
    pub seed: Option<u64>,
    /// SHA-256 of an ingested input file, when the stage did not simulate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hash: Option<String>,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: Option<u64>) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            input_hash: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn with_input_hash(mut self, hash: impl Into<String>) -> Self {
        self.input_hash = Some(hash.into());
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
