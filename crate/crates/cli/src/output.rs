use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use memsim_core::numerics::io::matrix_to_csv;
use memsim_core::Matrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliResult;

/// Writes run outputs below one directory and records their checksums.
pub struct OutputDir {
    root: PathBuf,
    checksums: BTreeMap<String, String>,
    started: Instant,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub outputs: &'a BTreeMap<String, String>,
    pub config: &'a RunConfig,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            checksums: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.checksums.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn text(&mut self, rel: &str, text: &str) -> CliResult<()> {
        self.write(rel, text.as_bytes())
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable");
        s.push('\n');
        self.text(rel, &s)
    }

    pub fn matrix(&mut self, rel: &str, m: &Matrix) -> CliResult<()> {
        self.text(rel, &matrix_to_csv(m))
    }

    /// Records every regular file already present below `rel` (written by library code).
    pub fn adopt_dir(&mut self, rel: &str) -> CliResult<()> {
        let mut entries: Vec<_> = fs::read_dir(self.path(rel))?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            if e.file_type()?.is_file() {
                let bytes = fs::read(e.path())?;
                let name = format!("{rel}/{}", e.file_name().to_string_lossy());
                self.checksums.insert(name, hex::encode(Sha256::digest(&bytes)));
            }
        }
        Ok(())
    }

    pub fn finish(self, subcommand: &str, config: &RunConfig) -> CliResult<()> {
        let manifest = RunManifest {
            tool: "memsim",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed: config.seed,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs: &self.checksums,
            config,
        };
        let mut s = serde_json::to_string_pretty(&manifest).expect("serializable");
        s.push('\n');
        fs::write(self.root.join("manifest.json"), s)?;
        Ok(())
    }
}

/// CSV with a header row and one row per record.
pub fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}
