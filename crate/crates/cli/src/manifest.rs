//! Run manifests: every subcommand records its inputs, parameters, seeds,
//! and output content hashes next to its primary output.
//!
//! Manifests carry no wall-clock data, so identical runs write identical
//! manifest bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// FNV-1a 64-bit content hash, hex-encoded.
pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRef {
    pub path: String,
    pub bytes: u64,
    pub fnv1a64: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        Ok(FileRef {
            path: path.display().to_string(),
            bytes: data.len() as u64,
            fnv1a64: fnv1a64_hex(&data),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub parameters: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
}

impl RunManifest {
    pub fn new(command: &str, parameters: serde_json::Value) -> Self {
        RunManifest {
            tool: format!("urbanseg {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            parameters,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(FileRef::of(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        self.outputs.push(FileRef::of(path)?);
        Ok(self)
    }

    /// Write `<primary>.manifest.json` next to the primary output.
    pub fn write_for(&self, primary_output: &Path) -> Result<()> {
        let mut name = primary_output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = primary_output.with_file_name(name);
        self.write(&path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
