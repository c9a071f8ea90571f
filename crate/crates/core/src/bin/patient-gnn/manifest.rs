//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use patient_gnn::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub run_id: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn checksum(path: &Path) -> Result<Artifact> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(Artifact {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// Output directory of one invocation. Files are registered as they are written
/// and checksummed into the manifest by [`RunDir::finish`].
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
    outputs: Vec<String>,
}

pub struct RunSpec<'a> {
    pub command: &'a str,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub root: &'a Path,
    /// Explicit directory; otherwise `<root>/<command>-<run id>`.
    pub out: Option<&'a Path>,
    pub force: bool,
}

impl RunDir {
    pub fn create(spec: RunSpec<'_>) -> Result<RunDir> {
        let inputs = spec.inputs.iter().map(|p| checksum(p)).collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        h.update(spec.command.as_bytes());
        h.update(serde_json::to_vec(&spec.config)?);
        for a in &inputs {
            h.update(a.sha256.as_bytes());
        }
        let run_id = hex::encode(h.finalize())[..12].to_string();
        let dir = match spec.out {
            Some(d) => d.to_path_buf(),
            None => spec.root.join(format!("{}-{run_id}", spec.command)),
        };
        let occupied = std::fs::read_dir(&dir).is_ok_and(|mut it| it.next().is_some());
        if occupied && !spec.force {
            return Err(Error::invalid(
                "out",
                format!("{} already exists and is not empty; pass --force to overwrite", dir.display()),
            ));
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        Ok(RunDir {
            dir,
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: spec.command.to_string(),
                run_id,
                config: spec.config,
                seeds: spec.seeds,
                inputs,
                outputs: Vec::new(),
                started_unix: now(),
                finished_unix: 0,
            },
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path for an output file, registered for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let path = self.output(name);
        let io = |e| Error::Io { path: path.clone(), source: e };
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        f(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_with(name, |w| w.write_all(text.as_bytes()))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.outputs.sort();
        for name in &self.outputs {
            let mut a = checksum(&self.dir.join(name))?;
            a.path = name.clone();
            self.manifest.outputs.push(a);
        }
        self.manifest.finished_unix = now();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
        Ok(self.dir)
    }
}
