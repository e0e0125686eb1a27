//! Run record-keeping: an exclusive lock per output directory and a
//! JSON-lines log of every invocation with input paths, config hash, seed,
//! and output checksums.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("checksumming {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Exclusive advisory lock: one writer per output directory.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    out_dir.display(),
                    path.display()
                )
            }
            Err(e) => Err(e).context("acquiring output lock"),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// One run entry appended to `runs.jsonl` in the output directory.
pub struct RunRecord {
    pub subcommand: String,
    pub inputs: Vec<PathBuf>,
    pub config_sha256: String,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunRecord {
    pub fn append_to(&self, out_dir: &Path) -> Result<()> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for path in &self.outputs {
            outputs.push(serde_json::json!({
                "path": path.display().to_string(),
                "sha256": sha256_file(path)?,
            }));
        }
        let line = serde_json::json!({
            "subcommand": self.subcommand,
            "inputs": self.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "outputs": outputs,
        });
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("runs.jsonl"))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}
