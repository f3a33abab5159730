//! Run manifests: a resolved snapshot of one subcommand invocation.
//!
//! The manifest is written next to the primary output as
//! `<output>.manifest.json`; its hash is the SHA-256 of those bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{Failure, Outcome};

pub const MANIFEST_SCHEMA: &str = "cliffkit-manifest/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub subcommand: String,
    /// Every option of the subcommand, defaults resolved.
    pub args: serde_json::Value,
    pub seed: Option<u64>,
    /// Input files with their digests; checkpoints included.
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Outcome<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Failure::input(e).context(format!("reading {}", path.display())))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// `<path>.<suffix>`, keeping the full original file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

impl RunManifest {
    pub fn new<A: Serialize>(
        subcommand: &str,
        args: &A,
        seed: Option<u64>,
        inputs: &[&Path],
        outputs: Vec<PathBuf>,
    ) -> Outcome<Self> {
        Ok(RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            args: serde_json::to_value(args)?,
            seed,
            inputs: inputs.iter().map(|p| digest_file(p)).collect::<Outcome<_>>()?,
            outputs,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Writes the manifest to `path` and returns its hash.
    pub fn write(&self, path: &Path) -> Outcome<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Failure::input(e).context(format!("writing {}", path.display())))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Outcome<Self> {
        let bytes = fs::read(path).map_err(|e| Failure::input(e).context(format!("reading {}", path.display())))?;
        let manifest: RunManifest = serde_json::from_slice(&bytes)?;
        if manifest.schema != MANIFEST_SCHEMA {
            return Err(Failure::compat(anyhow::anyhow!(
                "unsupported manifest schema {:?}",
                manifest.schema
            )));
        }
        Ok(manifest)
    }

    /// Fails if any recorded input changed since the run.
    pub fn verify_inputs(&self) -> Outcome<()> {
        for input in &self.inputs {
            let now = digest_file(&input.path)?;
            if now.sha256 != input.sha256 {
                return Err(Failure::input(anyhow::anyhow!(
                    "input {} changed since the recorded run",
                    input.path.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_keeps_extension() {
        assert_eq!(sidecar(Path::new("out/p.jsonl"), "manifest.json"), PathBuf::from("out/p.jsonl.manifest.json"));
        assert_eq!(sidecar(Path::new("m.ckpt"), "report.json"), PathBuf::from("m.ckpt.report.json"));
    }

    #[test]
    fn hash_is_stable() {
        let m = RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            tool_version: "0".into(),
            subcommand: "x".into(),
            args: serde_json::json!({"a": 1}),
            seed: Some(3),
            inputs: vec![],
            outputs: vec![PathBuf::from("o")],
        };
        assert_eq!(m.to_bytes(), m.clone().to_bytes());
        assert_eq!(sha256_hex(&m.to_bytes()).len(), 64);
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
