//! Deterministic CSV and JSON writers.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::report(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// A CSV file read as header plus string rows.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
        let header = r
            .headers()
            .map_err(|e| CliError::csv(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::csv(path, e))?;
        Ok(Self { header, rows })
    }

    /// Column indices for `names`, or an error listing every missing one.
    pub fn columns(&self, path: &Path, names: &[&str]) -> CliResult<Vec<usize>> {
        let missing: Vec<&str> = names
            .iter()
            .copied()
            .filter(|n| !self.header.iter().any(|h| h == n))
            .collect();
        if !missing.is_empty() {
            return Err(CliError::report(
                path,
                format!("missing column(s): {}", missing.join(", ")),
            ));
        }
        Ok(names
            .iter()
            .map(|n| self.header.iter().position(|h| h == n).expect("checked"))
            .collect())
    }
}
