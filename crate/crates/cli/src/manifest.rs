//! Run manifests: what ran, with which config, producing which files.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    /// Digest of the effective configuration, stable under key reordering.
    pub config_digest: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, config: &serde_json::Value, seed: u64) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            config_digest: digest(config),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started_unix: now_unix(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Finalize and write `manifest.json` into `dir` atomically.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<()> {
        self.finished_unix = now_unix();
        self.outputs.sort();
        let bytes = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        nebp_core::fsio::atomic_write(&dir.join("manifest.json"), &bytes)
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// FNV-1a over the canonical (sorted-key) JSON encoding.
pub fn digest(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("json serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in canonical.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}
