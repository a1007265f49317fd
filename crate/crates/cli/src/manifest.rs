use std::path::Path;

use mvdiv::RawParams;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every output and embedded in each file
/// through its digest.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub params: RawParams,
    pub config_sha256: String,
    pub seed: u64,
    pub tool_version: String,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    /// Flags that changed the run, e.g. overrides.
    pub overrides: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, params: RawParams, config: &[u8], seed: u64) -> Self {
        Self {
            command: command.to_string(),
            params,
            config_sha256: hex(&Sha256::digest(config)),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
            overrides: Vec::new(),
        }
    }

    /// SHA-256 of the manifest's JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serialises");
        hex(&Sha256::digest(json))
    }

    /// The manifest with its digest, for embedding in JSON outputs.
    pub fn stamped(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("manifest serialises");
        v["digest"] = serde_json::Value::String(self.digest());
        v
    }

    /// First line of every CSV output.
    pub fn csv_comment(&self) -> String {
        format!("# mvdiv manifest sha256={}\n", self.digest())
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        write_file(dir, "manifest.json", pretty(&self.stamped()).as_bytes())
    }
}

pub fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialises");
    s.push('\n');
    s
}

pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}
