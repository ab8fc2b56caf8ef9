//! Delimited text input and TSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A delimited file with a header row; cells are kept as text until a
/// column is requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    rows: Vec<Vec<String>>,
    /// 1-based source line of each row.
    lines: Vec<usize>,
}

impl Table {
    /// Parses `text`; blank lines are skipped.
    pub fn parse(text: &str, delimiter: char) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty file, expected a header row".into(),
        })?;
        let headers: Vec<String> = header.split(delimiter).map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        let mut numbers = Vec::new();
        for (idx, line) in lines {
            let cells: Vec<String> = line.split(delimiter).map(|c| c.trim().to_string()).collect();
            if cells.len() != headers.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected {} fields, found {}", headers.len(), cells.len()),
                });
            }
            rows.push(cells);
            numbers.push(idx + 1);
        }
        Ok(Table {
            headers,
            rows,
            lines: numbers,
        })
    }

    /// Reads a file; `.tsv` files are tab-delimited, everything else comma.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let delimiter = if path.extension().is_some_and(|e| e == "tsv") {
            '\t'
        } else {
            ','
        };
        Self::parse(&text, delimiter)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Column by header name, or by 0-based index when `key` is an integer
    /// that is not itself a header.
    pub fn column_index(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.headers.iter().position(|h| h == key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.headers.len() => Ok(i),
            _ => Err(Error::invalid(format!(
                "column '{key}' not found; available columns: {}",
                self.headers.join(", ")
            ))),
        }
    }

    /// Numeric values of column `index`.
    pub fn numeric_column(&self, index: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(row, &line)| {
                let cell = &row[index];
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::Parse {
                        line,
                        message: format!("non-numeric value '{cell}' in column '{}'", self.headers[index]),
                    }),
                }
            })
            .collect()
    }
}

/// Shortest-roundtrip-safe rendering with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// A TSV document built row by row.
#[derive(Debug, Clone, Default)]
pub struct Tsv {
    text: String,
}

impl Tsv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut t = Tsv::default();
        t.push_cells(header.iter().map(|h| h.as_ref().to_string()));
        t
    }

    pub fn push_cells(&mut self, cells: impl IntoIterator<Item = String>) {
        let line: Vec<String> = cells.into_iter().collect();
        let _ = writeln!(self.text, "{}", line.join("\t"));
    }

    pub fn push_floats(&mut self, values: &[f64]) {
        self.push_cells(values.iter().map(|v| format_float(*v)));
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

/// Parses `lo:hi:count` into `count` evenly spaced values.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::invalid(format!("grid '{spec}' is not of the form lo:hi:count"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect())
}
