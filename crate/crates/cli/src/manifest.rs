//! Run manifests: every command records its resolved configuration, seed,
//! input digests, and tool version before doing any computation, so a run
//! can be reproduced from the manifest alone.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use exgrg_core::config::TrainConfig;
use exgrg_core::{Error, Result};

pub struct Manifest {
    pub command: &'static str,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub inputs: Vec<(String, PathBuf)>,
    pub config_text: String,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

impl Manifest {
    pub fn new(command: &'static str, seed: u64, out_dir: &Path, cfg: &TrainConfig) -> Self {
        Manifest {
            command,
            seed,
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            config_text: cfg.to_text(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> &mut Self {
        self.inputs.push((label.to_string(), path.to_path_buf()));
        self
    }

    pub fn optional_input(&mut self, label: &str, path: &Path) -> &mut Self {
        if path.exists() {
            self.input(label, path);
        }
        self
    }

    /// Write `manifest.txt` and the resolved `config.txt` into the output
    /// directory. Called before any computation starts.
    pub fn write(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Error::io(self.out_dir.display().to_string(), e))?;
        let config_path = self.out_dir.join("config.txt");
        std::fs::write(&config_path, &self.config_text)
            .map_err(|e| Error::io(config_path.display().to_string(), e))?;

        let mut s = String::new();
        let _ = writeln!(s, "tool.name = exgrg");
        let _ = writeln!(s, "tool.version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "config.path = {}", config_path.display());
        let _ = writeln!(s, "config.sha256 = {}", sha256_of_bytes(self.config_text.as_bytes()));
        for (label, path) in &self.inputs {
            let _ = writeln!(s, "input.{label}.path = {}", path.display());
            let _ = writeln!(s, "input.{label}.sha256 = {}", sha256_hex(path)?);
        }
        let manifest_path = self.out_dir.join("manifest.txt");
        std::fs::write(&manifest_path, s)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        Ok(())
    }
}

fn sha256_of_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}
