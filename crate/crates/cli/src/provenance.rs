//! Provenance sidecars: every output `f` gets `f.prov.json` recording the
//! tool version, command, resolved configuration and its hash, the seed and
//! the output's own digest. Nothing time-dependent is recorded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
struct Sidecar<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    file: String,
    sha256: String,
    config: &'a serde_json::Value,
}

/// Output directory plus the provenance shared by its files.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub dir: PathBuf,
    command: String,
    config: serde_json::Value,
    config_hash: String,
    seed: u64,
}

impl Outputs {
    /// The output location is not part of the recorded configuration, so
    /// identical runs into different directories carry identical sidecars.
    pub fn create(dir: &Path, command: &str, mut config: serde_json::Value, seed: u64) -> Result<Self, CliError> {
        if let Some(map) = config.as_object_mut() {
            map.remove("out_dir");
        }
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("cannot create output directory {}: {e}", dir.display())))?;
        let config_hash = sha256_hex(serde_json::to_string(&config).expect("config serialises").as_bytes());
        Ok(Outputs {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config,
            config_hash,
            seed,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Writes the sidecar for an already written output file.
    pub fn record(&self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let sidecar = Sidecar {
            tool: "geobdl",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            config_hash: &self.config_hash,
            seed: self.seed,
            file: name.clone(),
            sha256: sha256_hex(&bytes),
            config: &self.config,
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises") + "\n";
        let side = path.with_file_name(format!("{name}.prov.json"));
        fs::write(&side, text).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))
    }

    /// Writes `text` to `name` and records it.
    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.record(&path)?;
        Ok(path)
    }
}
