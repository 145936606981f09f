//! Output headers recording tool version, config hash and input hashes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// Hash of the effective config, after flag overrides. Paths are left out so
/// that moving a dataset does not change the hash.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let mut c = cfg.clone();
    c.paths = Default::default();
    short_hash(c.to_toml().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Provenance {
    pub tool: String,
    pub config: String,
    /// `(file name, hash)` pairs.
    pub inputs: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(cfg: &PipelineConfig) -> Provenance {
        Provenance {
            tool: format!("objmap {VERSION}"),
            config: config_hash(cfg),
            inputs: Vec::new(),
        }
    }

    pub fn with_input(mut self, path: &Path) -> Result<Provenance> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push((file_name(path), short_hash(&bytes)));
        Ok(self)
    }

    pub fn with_bytes(mut self, name: &str, bytes: &[u8]) -> Provenance {
        self.inputs.push((name.to_string(), short_hash(bytes)));
        self
    }

    /// `# objmap 0.1.0 config=… inputs=a.txt:…,b.txt:…`
    pub fn header(&self) -> String {
        let inputs: Vec<String> = self.inputs.iter().map(|(n, h)| format!("{n}:{h}")).collect();
        format!("# {} config={} inputs={}\n", self.tool, self.config, inputs.join(","))
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
