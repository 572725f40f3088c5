//! `manifest.json`: what was run, with which configuration, and what it wrote.

use std::path::{Path, PathBuf};

use cascade_unet::config::Config;
use cascade_unet::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file below `dir` (except an existing manifest) and writes the manifest.
pub fn write(dir: &Path, command: &str, argv: &[String], config: &Config) -> Result<PathBuf> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    files.sort();
    let mut artifacts = Vec::new();
    for path in files {
        let rel = path.strip_prefix(dir).unwrap_or(&path);
        if rel == Path::new(FILE_NAME) {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        artifacts.push(json!({
            "path": rel.to_string_lossy().replace('\\', "/"),
            "bytes": bytes.len(),
            "sha256": sha256_hex(&bytes),
        }));
    }
    let manifest = json!({
        "command": command,
        "argv": argv,
        "seed": config.seed,
        "profile": config.profile,
        "config": config.to_toml(),
        "artifacts": Value::Array(artifacts),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let path = dir.join(FILE_NAME);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
