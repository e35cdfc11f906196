//! Run manifests tying every output file to the inputs that produced it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use admission_core::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub code_version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects output files for one command and writes the manifest last.
pub struct Run {
    command: String,
    config_digest: String,
    seed: Option<u64>,
    out_dir: PathBuf,
    outputs: Vec<String>,
    started: Instant,
}

impl Run {
    pub fn start(command: &str, config_digest: String, seed: Option<u64>, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(Self {
            command: command.into(),
            config_digest,
            seed,
            out_dir: out_dir.to_path_buf(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.into());
        self.out_dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(path, contents)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            config_digest: self.config_digest,
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.out_dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_hex_sha256() {
        assert_eq!(digest(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::start("test", "d".into(), Some(3), dir.path()).unwrap();
        run.write("a.txt", b"x").unwrap();
        let m = run.finish().unwrap();
        assert_eq!(m.outputs, vec!["a.txt".to_string()]);
        assert!(dir.path().join(MANIFEST_FILE).exists());
    }
}
