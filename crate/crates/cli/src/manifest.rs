use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

/// What one invocation read, wrote and was configured with. Two runs with
/// the same `(config_hash, seed)` produce the same outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_time: Duration,
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash(config_text),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time: Duration::ZERO,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed.map_or("none".into(), |v| v.to_string()));
        for p in &self.inputs {
            let _ = writeln!(s, "input = {}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output = {}", p.display());
        }
        let _ = writeln!(s, "tool_version = {}", self.tool_version);
        let _ = writeln!(s, "wall_time_s = {:.3}", self.wall_time.as_secs_f64());
        s
    }

    /// Next to `output`: `<dir>/manifest.txt` for a directory, else
    /// `<file>.manifest.txt`.
    pub fn path_for(output: &Path) -> PathBuf {
        if output.is_dir() {
            output.join("manifest.txt")
        } else {
            let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".manifest.txt");
            output.with_file_name(name)
        }
    }

    pub fn write_next_to(&self, output: &Path) -> std::io::Result<PathBuf> {
        let path = Self::path_for(output);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }
}
