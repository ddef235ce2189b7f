//! Run manifests: configuration, input digests, tool version, wall time.
//!
//! Every subcommand writes `manifest.json` into its output directory. All
//! other artifacts are byte-stable across reruns; the timestamp and wall
//! time live only here.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub args: BTreeMap<String, String>,
    /// Input path -> sha256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub threads: usize,
    pub wall_time_ms: u128,
    pub timestamp_unix_ms: u128,
}

pub struct ManifestBuilder {
    subcommand: String,
    args: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            args: BTreeMap::new(),
            inputs: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn opt_arg(&mut self, key: &str, value: &Option<impl ToString>) -> &mut Self {
        if let Some(v) = value {
            self.args.insert(key.to_string(), v.to_string());
        }
        self
    }

    /// Digest one input file.
    pub fn input(&mut self, path: &Path) -> std::io::Result<&mut Self> {
        let mut file = std::fs::File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 65536];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        self.inputs
            .insert(path.display().to_string(), hex::encode(hasher.finalize()));
        Ok(self)
    }

    /// Digest every regular file directly under a directory.
    pub fn input_dir(&mut self, dir: &Path) -> std::io::Result<&mut Self> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for path in entries {
            self.input(&path)?;
        }
        Ok(self)
    }

    pub fn write(&self, out_dir: &Path, threads: usize) -> std::io::Result<()> {
        let manifest = Manifest {
            tool: "gradegap",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand.clone(),
            args: self.args.clone(),
            inputs: self.inputs.clone(),
            threads,
            wall_time_ms: self.started.elapsed().as_millis(),
            timestamp_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        };
        std::fs::create_dir_all(out_dir)?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(out_dir.join("manifest.json"), json)
    }
}
