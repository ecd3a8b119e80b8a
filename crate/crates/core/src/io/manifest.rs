//! Run manifests: the effective config, seeds, tool version and hashes of
//! every input and output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory for outputs; as given for inputs.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Command arguments after config resolution, enough to rerun.
    pub invocation: serde_json::Value,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

impl Manifest {
    pub fn new(command: &str, invocation: serde_json::Value, config: &RunConfig) -> Self {
        Manifest {
            tool: "geoflow".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            invocation,
            config: config.clone(),
            config_hash: config.hash(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Hashes every regular file under `dir` except the manifest itself, in
    /// sorted path order.
    pub fn record_outputs(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(dir, dir, &mut files)?;
        files.retain(|p| p != Path::new(MANIFEST_FILE));
        files.sort();
        self.outputs = files
            .into_iter()
            .map(|rel| Ok(FileRecord { sha256: sha256_file(&dir.join(&rel))?, path: rel }))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let mut files = Vec::new();
        if path.is_dir() {
            collect_files(path, path, &mut files)?;
            files.sort();
            for rel in files {
                let full = path.join(&rel);
                self.inputs.push(FileRecord { sha256: sha256_file(&full)?, path: full });
            }
        } else {
            self.inputs.push(FileRecord { sha256: sha256_file(path)?, path: path.to_path_buf() });
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_sorted_and_exclude_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("b.txt"), "b").unwrap();
        fs::write(dir.path().join("sub/a.txt"), "a").unwrap();
        let mut m = Manifest::new("gen", serde_json::json!({}), &RunConfig::default());
        m.write(dir.path()).unwrap();
        m.record_outputs(dir.path()).unwrap();
        let paths: Vec<_> = m.outputs.iter().map(|f| f.path.clone()).collect();
        assert_eq!(paths, vec![PathBuf::from("b.txt"), PathBuf::from("sub/a.txt")]);
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    }
}
