//! Per-run provenance: what was run, on which files, producing which files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.to_owned(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector after the program name; replaying it reruns the command.
    pub args: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started: String,
    pub finished: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Collects a run's facts while it executes.
#[derive(Debug)]
pub struct Recorder {
    manifest: RunManifest,
}

impl Recorder {
    pub fn start(command: &str, args: &[String]) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_owned(),
                args: args.to_vec(),
                config: BTreeMap::new(),
                seed: 0,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started: now(),
                finished: String::new(),
            },
        }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) {
        self.manifest.config.insert(key.to_owned(), value.to_string());
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = seed;
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> Result<RunManifest, CliError> {
        self.manifest.finished = now();
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| CliError::output(path, e))?;
        Ok(self.manifest)
    }
}

pub fn load(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Output paths whose recorded checksum differs from the file on disk now.
pub fn changed_outputs(m: &RunManifest) -> Vec<String> {
    m.outputs
        .iter()
        .filter(|a| sha256_file(&a.path).map_or(true, |h| h != a.sha256))
        .map(|a| a.path.display().to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn round_trip_and_change_detection() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        let out = dir.path().join("out.txt");
        fs::write(&input, "x").unwrap();
        fs::write(&out, "y").unwrap();
        let mut r = Recorder::start("demo", &["demo".into()]);
        r.config("k", 3);
        r.seed(7);
        r.input(&input).unwrap();
        r.output(&out).unwrap();
        let mpath = dir.path().join("manifest.json");
        let m = r.finish(&mpath).unwrap();
        let back = load(&mpath).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config["k"], "3");
        assert!(changed_outputs(&back).is_empty());
        fs::write(&out, "z").unwrap();
        assert_eq!(changed_outputs(&back).len(), 1);
    }
}
