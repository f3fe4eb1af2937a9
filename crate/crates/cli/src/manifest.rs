//! Per-stage run manifests: what went in, what came out, and under which
//! configuration. Manifests carry no timestamps so reruns compare equal.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const FORMAT: &str = "claimgraph-manifest/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    /// `None` for volatile outputs such as timing logs.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub stage: String,
    pub scenario: Option<u8>,
    pub versions: BTreeMap<String, String>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Paths inside `root` are recorded relative to it, others as given.
fn display_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub struct ManifestBuilder<'a> {
    root: &'a Path,
    manifest: Manifest,
}

impl<'a> ManifestBuilder<'a> {
    pub fn new(root: &'a Path, stage: &str, scenario: Option<u8>, config_hash: &str) -> Self {
        let versions = BTreeMap::from([
            ("claimgraph".to_string(), claimgraph::VERSION.to_string()),
            ("claimgraph-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]);
        ManifestBuilder {
            root,
            manifest: Manifest {
                format: FORMAT.into(),
                stage: stage.into(),
                scenario,
                versions,
                config_hash: config_hash.into(),
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.manifest.seeds.insert(name.into(), value);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path)?;
        self.manifest.inputs.push(FileDigest {
            path: display_path(self.root, path),
            sha256: Some(digest),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path)?;
        self.manifest.outputs.push(FileDigest {
            path: display_path(self.root, path),
            sha256: Some(digest),
        });
        Ok(())
    }

    pub fn volatile_output(&mut self, path: &Path) {
        self.manifest.outputs.push(FileDigest {
            path: display_path(self.root, path),
            sha256: None,
        });
    }

    /// Writes `manifest.json` into `dir` and returns the manifest.
    pub fn write(self, dir: &Path) -> Result<Manifest, CliError> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self.manifest)
    }
}
