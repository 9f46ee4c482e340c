//! CSV helpers shared by every module that emits or reads tables.
//!
//! Numbers are written with 17 significant digits and a `.` decimal
//! separator so files round-trip bit for bit.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

/// 17 significant digits, locale independent.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    format!("{v:.16e}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format { path: path.to_path_buf(), reason: format!("{other:?}") },
    }
}

/// Row-oriented CSV writer with a fixed header.
pub struct CsvWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
    width: usize,
}

impl CsvWriter {
    pub fn create<S: AsRef<str>>(path: &Path, header: &[S]) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(header.iter().map(|h| h.as_ref())).map_err(|e| csv_err(path, e))?;
        Ok(CsvWriter { inner, path: path.to_path_buf(), width: header.len() })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.width, "row width");
        self.inner.write_record(fields.iter().map(|f| f.as_ref())).map_err(|e| csv_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// A numeric table read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// Reads a CSV whose fields are all numeric.
pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("row {}: `{f}` is not a number", i + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}
