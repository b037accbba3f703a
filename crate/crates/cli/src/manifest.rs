//! Run manifests: what produced an output directory, plus a content hash that
//! every artifact embeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_path: Option<String>,
    /// SHA-256 of the effective configuration (file plus flag overrides).
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub phase_budgets: [usize; 3],
    pub theta: Option<f64>,
    pub delta: f64,
    /// Input artifacts by file name, with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub output_dir: String,
    pub created_unix: u64,
    /// Hash over everything above except the output directory and timestamp.
    pub hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    tool_version: &'a str,
    command: &'a str,
    config_hash: &'a str,
    seeds: &'a [u64],
    phase_budgets: [usize; 3],
    theta: Option<f64>,
    delta: f64,
    inputs: &'a BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        config_json: &str,
        seeds: Vec<u64>,
        phase_budgets: [usize; 3],
        theta: Option<f64>,
        delta: f64,
        inputs: BTreeMap<String, String>,
        output_dir: &Path,
    ) -> Self {
        let config_hash = sha256_hex(config_json.as_bytes());
        let hashed = Hashed {
            tool_version: TOOL_VERSION,
            command,
            config_hash: &config_hash,
            seeds: &seeds,
            phase_budgets,
            theta,
            delta,
            inputs: &inputs,
        };
        let hash = sha256_hex(&serde_json::to_vec(&hashed).expect("manifest serializes"));
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            config_hash,
            seeds,
            phase_budgets,
            theta,
            delta,
            inputs,
            output_dir: output_dir.display().to_string(),
            created_unix,
            hash,
        }
    }

    /// Comment line embedded at the top of CSV outputs.
    pub fn tag(&self) -> String {
        format!("bunker {} manifest {}", self.tool_version, self.hash)
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let path = dir.join(format!("manifest_{}.json", self.command));
        std::fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make(out: &str, inputs: BTreeMap<String, String>) -> RunManifest {
        RunManifest::new("evaluate", None, "{}", vec![0, 1], [6, 2, 2], Some(0.5), 3.0, inputs, Path::new(out))
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = make("a", BTreeMap::new());
        let b = make("b", BTreeMap::new());
        assert_eq!(a.hash, b.hash);
        let mut inputs = BTreeMap::new();
        inputs.insert("x.json".into(), sha256_hex(b"x"));
        assert_ne!(make("a", inputs).hash, a.hash);
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
