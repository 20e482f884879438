//! Run manifests: every output CSV is paired with one manifest file holding
//! the tool version, the effective master seed, the fully resolved config,
//! per-operation timings and the output hash, so a run can be reproduced
//! from the manifest alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
    pub rows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub master_seed: u64,
    pub threads: usize,
    /// Resolved config (all defaults explicit), as TOML text; writing it to
    /// a file and re-running the command reproduces the outputs.
    pub resolved_config: String,
    pub timings_ms: Vec<(String, u128)>,
    pub outputs: Vec<OutputRecord>,
    /// Free-form per-command summary lines (argmin reports, curve shapes).
    pub notes: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl RunManifest {
    pub fn manifest_path(csv_path: &Path) -> std::path::PathBuf {
        let mut s = csv_path.as_os_str().to_os_string();
        s.push(".manifest.json");
        std::path::PathBuf::from(s)
    }

    pub fn write_next_to(&self, csv_path: &Path) -> Result<(), CliError> {
        let path = Self::manifest_path(csv_path);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
