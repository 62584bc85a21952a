use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tsrom::datagen::sha256_hex;
use tsrom::model::write_atomic;
use tsrom::{Error, Result};

/// Environment variable naming the default root for run directories.
pub const RUN_ROOT_ENV: &str = "TSROM_RUN_ROOT";

pub fn default_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    library_version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_digest: Option<&'a str>,
    seeds: &'a BTreeMap<String, u64>,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    wall_clock_secs: f64,
}

/// An output directory plus the bookkeeping for its `run.json`.
pub struct Run {
    pub dir: PathBuf,
    command: &'static str,
    config_digest: Option<String>,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    started: Instant,
}

impl Run {
    pub fn create(dir: PathBuf, command: &'static str) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        Ok(Self {
            dir,
            command,
            config_digest: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn digest(&mut self, digest: String) {
        self.config_digest = Some(digest);
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.into(), value);
    }

    pub fn input(&mut self, path: &Path) {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .into_iter()
                .flatten()
                .flatten()
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            self.inputs.extend(files);
        } else {
            self.inputs.push(path.to_path_buf());
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `name` inside the run directory and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)?;
        self.produced(name);
        Ok(())
    }

    /// Records a file written by someone else.
    pub fn produced(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    fn record(path: &Path, shown: String) -> Result<FileRecord> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(FileRecord {
            path: shown,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        })
    }

    /// Writes `run.json` last, listing every output with its digest.
    pub fn finish(self) -> Result<()> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| Self::record(p, p.display().to_string()))
            .collect::<Result<Vec<_>>>()?;
        let mut names = self.outputs.clone();
        names.sort();
        let outputs = names
            .iter()
            .map(|n| Self::record(&self.path(n), n.clone()))
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            library_version: tsrom::VERSION,
            config_digest: self.config_digest.as_deref(),
            seeds: &self.seeds,
            inputs,
            outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.path("run.json"), text.as_bytes())
    }
}
