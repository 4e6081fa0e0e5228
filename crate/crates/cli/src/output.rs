//! CSV and manifest writers. Floats are written in shortest round-trip form,
//! so a CSV re-parses to the exact values that were computed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::CliError;

pub struct Table {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Table {
    pub fn create(dir: &Path, file: &str, header: &[&str]) -> Result<Self, CliError> {
        let path = dir.join(file);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
        writer.write_record(header).map_err(|e| io_error(&path, e))?;
        Ok(Self { path, writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|e| io_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.writer.flush().map_err(|e| io_error(&self.path, e))?;
        Ok(self.path)
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))?;
    Ok(path.to_path_buf())
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a RunConfig,
    /// File names relative to the output directory.
    pub files: Vec<String>,
    pub summary: Value,
    pub wall_time_seconds: f64,
}

/// Writes `<command>.manifest.json` next to the outputs it describes.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    files: &[PathBuf],
    summary: Value,
    wall_time_seconds: f64,
) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        artifact: "hemoscale",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.seed,
        config,
        files: files
            .iter()
            .map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        summary,
        wall_time_seconds,
    };
    write_json(&dir.join(format!("{command}.manifest.json")), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 6.02214076e23, -0.0, 2000f64.powf(0.55)] {
            assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(opt(None), "");
    }
}
