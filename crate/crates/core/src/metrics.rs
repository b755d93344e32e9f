//! Column-oriented metric tables written as CSV.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("row has {found} cells, header has {expected}")]
    RowLength { expected: usize, found: usize },
    #[error("empty or headerless CSV")]
    NoHeader,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Text(_) => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // `Display` for f64 prints the shortest string that round-trips.
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl MetricsLog {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        MetricsLog { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<(), MetricsError> {
        if row.len() != self.header.len() {
            return Err(MetricsError::RowLength { expected: self.header.len(), found: row.len() });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric values of a column; non-numeric cells become NaN.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[idx].as_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.column(name).and_then(|c| c.last().copied())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(MetricsError::NoHeader)?;
        let mut log = MetricsLog::new(header.split(',').map(str::trim));
        for line in lines {
            let row = line
                .split(',')
                .map(|c| {
                    let c = c.trim();
                    c.parse::<f64>().map(Cell::Num).unwrap_or_else(|_| Cell::Text(c.to_string()))
                })
                .collect();
            log.push(row)?;
        }
        Ok(log)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        Self::parse_csv(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_floats_exact() {
        let mut log = MetricsLog::new(["step", "objective", "value"]);
        log.push(vec![0usize.into(), "allo".into(), 0.1f64.into()]).unwrap();
        log.push(vec![10usize.into(), "allo".into(), (1.0f64 / 3.0).into()]).unwrap();
        let back = MetricsLog::parse_csv(&log.to_csv_string()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.column("value").unwrap()[1], 1.0 / 3.0);
        assert!(back.column("missing").is_none());
    }

    #[test]
    fn rejects_ragged_rows() {
        let mut log = MetricsLog::new(["a", "b"]);
        assert!(matches!(log.push(vec![1.0.into()]), Err(MetricsError::RowLength { .. })));
        assert!(matches!(MetricsLog::parse_csv(""), Err(MetricsError::NoHeader)));
    }
}
