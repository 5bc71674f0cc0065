//! Result persistence: a CSV table, a JSON summary and a frozen copy of the
//! resolved config per run, named after the experiment kind and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentKind, WorkbenchConfig};
use crate::error::{Error, Result};

/// Row-oriented table with a header line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Dimension {
                expected: self.header.len(),
                actual: row.len(),
                context: "table row",
            });
        }
        self.rows.push(row);
        Ok(())
    }

    /// CSV text with RFC-4180 quoting.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record(&self.header).map_err(ser)?;
        for r in &self.rows {
            w.write_record(r).map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Shortest text that parses back to the same `f64`; empty for `None`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Paths written by [`persist_results`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Written {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
}

/// `{kind}_seed{seed}` stem shared by every file of one run.
pub fn file_stem(kind: ExperimentKind, seed: u64) -> String {
    format!("{kind}_seed{seed}")
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `{stem}.csv`, `{stem}_summary.json` and `{stem}_config.toml` (the
/// frozen config) into `out_dir`, creating it if needed. Same inputs give the
/// same bytes.
pub fn persist_results<S: Serialize>(
    out_dir: &Path,
    config: &WorkbenchConfig,
    table: &Table,
    summary: &S,
) -> Result<Written> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = file_stem(config.kind, config.seed);
    let written = Written {
        csv: out_dir.join(format!("{stem}.csv")),
        summary: out_dir.join(format!("{stem}_summary.json")),
        config: out_dir.join(format!("{stem}_config.toml")),
    };
    write(&written.csv, table.to_csv()?.as_bytes())?;
    let mut json = serde_json::to_string_pretty(summary).map_err(|e| Error::Serialization(e.to_string()))?;
    json.push('\n');
    write(&written.summary, json.as_bytes())?;
    write(&written.config, config.frozen().to_toml_string()?.as_bytes())?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        let mut t = Table::new(["name", "value"]);
        t.push(vec!["plain".into(), "1".into()]).unwrap();
        t.push(vec!["has,comma".into(), "say \"hi\"".into()]).unwrap();
        assert_eq!(t.to_csv().unwrap(), "name,value\r\nplain,1\r\n\"has,comma\",\"say \"\"hi\"\"\"\r\n");
        assert!(t.push(vec!["short".into()]).is_err());
    }

    #[test]
    fn float_text_round_trips() {
        for v in [0.1, 1.0 / 3.0, 9.549496387119204, 1e-300, -2.5e10] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_opt(None), "");
    }
}
