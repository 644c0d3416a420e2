//! The record every command leaves in its output directory.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "run_manifest.toml";

pub const VERSION: &str = env!("SEGT_BUILD_VERSION");

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the resolved configuration's TOML text.
    pub config_sha256: String,
    pub out_dir: PathBuf,
    pub started: String,
    pub finished: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The fully resolved configuration.
    pub config: toml::Table,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, resolved_toml: &str, out_dir: &Path, started: String) -> Self {
        RunManifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config_sha256: sha256_hex(resolved_toml),
            out_dir: out_dir.to_path_buf(),
            started,
            finished: String::new(),
            exit_code: 0,
            error: None,
            config: toml::from_str(resolved_toml).unwrap_or_default(),
        }
    }

    pub fn write(mut self, exit_code: i32, error: Option<String>) -> std::io::Result<()> {
        self.finished = now();
        self.exit_code = exit_code;
        self.error = error;
        let text = toml::to_string(&self).expect("manifest serialises");
        std::fs::write(self.out_dir.join(FILE_NAME), text)
    }
}
