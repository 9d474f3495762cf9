//! CSV writing and reading with shortest round-trip numeric formatting.
//!
//! Every file written here is a deterministic function of its inputs, and
//! every number is printed with Rust's shortest-representation formatter, so
//! re-parsing reproduces the exact f64 bits and byte-identical replays can
//! be compared directly.

use std::io::Write;
use std::path::Path;

use crate::CliError;

/// Formats a float with the shortest representation that round-trips.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// A writer for one CSV file with a fixed header.
pub struct CsvWriter {
    out: std::io::BufWriter<std::fs::File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self {
            out,
            columns: header.len(),
        })
    }

    pub fn write_row(&mut self, fields: &[String]) -> Result<(), CliError> {
        debug_assert_eq!(fields.len(), self.columns);
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush()?;
        Ok(())
    }
}

/// A parsed CSV table: header plus raw string cells.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// A column parsed as f64 ("NaN" parses to NaN).
    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let idx = self
            .column_index(name)
            .ok_or_else(|| CliError::Scenario(format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|row| {
                row[idx]
                    .parse::<f64>()
                    .map_err(|e| CliError::Scenario(format!("bad number in '{name}': {e}")))
            })
            .collect()
    }
}

/// Reads back a CSV file written by [`CsvWriter`].
pub fn read_csv(path: &Path) -> Result<CsvTable, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::Scenario(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(CliError::Scenario(format!(
                "{} row {} has {} fields, expected {}",
                path.display(),
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}
