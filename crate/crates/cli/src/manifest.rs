use std::fs;
use std::path::{Path, PathBuf};

use mlab_core::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance written next to every output: rerunning with an equal manifest
/// reproduces the output bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    pub fn maybe_input(self, path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => self.input(p),
            None => Ok(self),
        }
    }

    /// Records `out` and writes the manifest beside it.
    pub fn write_for(mut self, out: &Path) -> Result<()> {
        self.outputs.push(out.to_path_buf());
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        fs::write(manifest_path(out), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_name() {
        assert_eq!(manifest_path(Path::new("a/b/model.mxc")), PathBuf::from("a/b/model.mxc.manifest.json"));
    }

    #[test]
    fn digest_of_known_bytes() {
        let dir = std::env::temp_dir().join(format!("mlab-manifest-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let f = dir.join("abc.txt");
        fs::write(&f, b"abc").unwrap();
        assert_eq!(
            sha256_file(&f).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        fs::remove_dir_all(dir).unwrap();
    }
}
