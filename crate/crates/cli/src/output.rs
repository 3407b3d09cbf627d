//! Output files. Every file carries the resolved configuration and seed:
//! JSON files in a `config` field, CSV files in leading `#` comment lines,
//! matrix dumps in a JSON block after the dimensions.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::Failure;

/// Magic bytes at the start of a matrix dump.
pub const MATRIX_MAGIC: &[u8; 16] = b"CONSERVA_MATRIX1";

pub struct Output {
    dir: PathBuf,
    provenance: Value,
}

fn io(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

impl Output {
    pub fn new(dir: &Path, command: &str, config: &ExperimentConfig) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            provenance: json!({
                "command": command,
                "seed": config.seed,
                "config": config,
                "version": env!("CARGO_PKG_VERSION"),
            }),
        })
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), Failure> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| io(&path, e))?;
        Ok((path, BufWriter::new(file)))
    }

    /// `{"command", "seed", "config", "version", "result"}`.
    pub fn json(&self, name: &str, result: &impl Serialize) -> Result<(), Failure> {
        let (path, mut w) = self.create(name)?;
        let mut doc = self.provenance.clone();
        doc["result"] = serde_json::to_value(result).map_err(|e| io(&path, e))?;
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| io(&path, e))?;
        writeln!(w).map_err(|e| io(&path, e))?;
        w.flush().map_err(|e| io(&path, e))
    }

    /// Comment lines with the provenance, then a header row and records.
    pub fn csv<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<(), Failure> {
        let (path, mut w) = self.create(name)?;
        writeln!(
            w,
            "# conserva {}",
            self.provenance["command"].as_str().unwrap_or("")
        )
        .and_then(|_| writeln!(w, "# seed: {}", self.provenance["seed"]))
        .and_then(|_| writeln!(w, "# config: {}", self.provenance["config"]))
        .map_err(|e| io(&path, e))?;
        let mut c = csv::Writer::from_writer(w);
        for r in rows {
            c.serialize(r).map_err(|e| io(&path, e))?;
        }
        c.flush().map_err(|e| io(&path, e))
    }

    /// Magic, rows and columns as u64 LE, metadata length as u64 LE, the
    /// metadata JSON, then the entries as f64 LE in row-major order.
    pub fn matrix(
        &self,
        name: &str,
        rows: usize,
        cols: usize,
        entries: impl Fn(usize, usize) -> f64,
        meta: Value,
    ) -> Result<(), Failure> {
        let (path, mut w) = self.create(name)?;
        let mut doc = self.provenance.clone();
        doc["matrix"] = meta;
        let meta = serde_json::to_vec(&doc).map_err(|e| io(&path, e))?;
        let mut write = || -> std::io::Result<()> {
            w.write_all(MATRIX_MAGIC)?;
            w.write_all(&(rows as u64).to_le_bytes())?;
            w.write_all(&(cols as u64).to_le_bytes())?;
            w.write_all(&(meta.len() as u64).to_le_bytes())?;
            w.write_all(&meta)?;
            for i in 0..rows {
                for j in 0..cols {
                    w.write_all(&entries(i, j).to_le_bytes())?;
                }
            }
            w.flush()
        };
        write().map_err(|e| io(&path, e))
    }
}
