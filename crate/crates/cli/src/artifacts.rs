//! CSV/JSON artifact writing. Every CSV starts with `#` lines carrying the
//! build hash and the resolved config, so identical runs give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn version_string() -> String {
    format!("entropy-net {}", env!("CARGO_PKG_VERSION"))
}

/// sha256 of the version string, hex encoded.
pub fn build_hash() -> String {
    hex::encode(Sha256::digest(version_string().as_bytes()))
}

/// Tabular artifact under construction.
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(config: &impl Serialize, header: &[&str]) -> Result<Self, CliError> {
        let cfg = serde_json::to_string(config).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut text = String::new();
        writeln!(text, "# {} build {}", version_string(), build_hash()).unwrap();
        writeln!(text, "# config {cfg}").unwrap();
        writeln!(text, "{}", header.join(",")).unwrap();
        Ok(Self {
            text,
            columns: header.len(),
        })
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.columns);
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, &self.text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
    }
}

/// Formats a float with the shortest round-trip representation.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn prepare_dir(dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}
