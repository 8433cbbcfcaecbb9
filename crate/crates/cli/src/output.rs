use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<String>,
    pub output_dir: String,
    pub timestamp: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<String>,
}

/// Output directory that remembers what was written, so the manifest can list it.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with a header computed at run time (e.g. one column per spatial axis).
    pub fn write_records(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write manifest.json last; it is the only file carrying a timestamp.
    pub fn finish(self, subcommand: &str, config_path: Option<&Path>, seed: Option<u64>) -> Result<RunManifest> {
        let versions = ["geometry", "extension", "wavepacket", "combinatorics", "estimator"]
            .iter()
            .map(|m| (m.to_string(), restriction_core::VERSION.to_string()))
            .chain(std::iter::once((
                "cli".to_string(),
                env!("CARGO_PKG_VERSION").to_string(),
            )))
            .collect();
        let manifest = RunManifest {
            subcommand: subcommand.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            output_dir: self.dir.display().to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            seed,
            versions,
            files: self.files,
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(manifest)
    }
}

/// Shortest round-trip rendering, as the csv serializer writes floats.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
