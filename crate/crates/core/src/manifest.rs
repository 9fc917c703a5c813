//! Run manifests and output-directory locks.

use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LOCK_FILE: &str = ".mmdemand.lock";

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub mmdemand: String,
    pub diffcore: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            mmdemand: env!("CARGO_PKG_VERSION").into(),
            diffcore: diffcore::VERSION.into(),
        }
    }
}

/// Kept apart so two runs can be compared with timing dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started: String,
    pub finished: String,
    pub wall_clock_secs: f64,
    /// Artifacts that hold wall-clock measurements.
    pub files: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub versions: Versions,
    /// TOML echo of the effective configuration.
    pub config: String,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<FileDigest>,
    pub timing: Timing,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    /// Same manifest with timing blanked.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing {
                started: String::new(),
                finished: String::new(),
                wall_clock_secs: 0.0,
                files: Vec::new(),
            },
            ..self.clone()
        }
    }
}

/// Collects inputs and artifacts during a run, then writes the manifest.
#[derive(Debug)]
pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: String,
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    timing_files: Vec<PathBuf>,
    started: chrono::DateTime<chrono::Utc>,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, dir: &Path, seed: u64, config: String) -> Self {
        Self {
            command: command.into(),
            seed,
            config,
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            timing_files: Vec::new(),
            started: chrono::Utc::now(),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn artifacts(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.artifacts.extend(paths);
    }

    /// An artifact whose content is timing, listed under `timing`.
    pub fn timing_artifact(&mut self, path: impl Into<PathBuf>) {
        self.timing_files.push(path.into());
    }

    fn digest(&self, path: &Path, relative: bool) -> Result<FileDigest> {
        let shown = if relative {
            path.strip_prefix(&self.dir).unwrap_or(path)
        } else {
            path
        };
        Ok(FileDigest {
            path: shown.to_string_lossy().replace('\\', "/"),
            sha256: sha256_file(path)?,
        })
    }

    /// Hashes everything recorded and writes `<command>.manifest.json` into
    /// the run directory. Returns the manifest path.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.inputs.sort();
        self.inputs.dedup();
        self.artifacts.sort();
        self.artifacts.dedup();
        let inputs = self.inputs.iter().map(|p| self.digest(p, false)).collect::<Result<Vec<_>>>()?;
        let artifacts = self.artifacts.iter().map(|p| self.digest(p, true)).collect::<Result<Vec<_>>>()?;
        let timing_files = self.timing_files.iter().map(|p| self.digest(p, true)).collect::<Result<Vec<_>>>()?;
        let finished = chrono::Utc::now();
        let m = RunManifest {
            command: self.command.clone(),
            seed: self.seed,
            versions: Versions::default(),
            config: self.config.clone(),
            inputs,
            artifacts,
            timing: Timing {
                started: self.started.to_rfc3339(),
                finished: finished.to_rfc3339(),
                wall_clock_secs: self.clock.elapsed().as_secs_f64(),
                files: timing_files,
            },
        };
        let path = self.dir.join(RunManifest::file_name(&self.command));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &m)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (remove {} if that run died)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_on_same_dir_fails_until_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        let err = OutputLock::acquire(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        drop(a);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn manifests_match_modulo_timing() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("a.txt");
        std::fs::write(&art, "x").unwrap();
        let write = || {
            let mut b = ManifestBuilder::new("train", dir.path(), 3, "k = 1\n".into());
            b.artifact(&art);
            RunManifest::load(&b.finish().unwrap()).unwrap()
        };
        let (m1, m2) = (write(), write());
        assert_eq!(m1.without_timing(), m2.without_timing());
        assert_eq!(m1.artifacts[0].path, "a.txt");
        assert_eq!(
            m1.artifacts[0].sha256,
            "2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881"
        );
    }
}
