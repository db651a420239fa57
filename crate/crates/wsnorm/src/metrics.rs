//! Run metrics in two interchangeable formats.
//!
//! Every row is `(run, epoch, step, metric, scope, value)`. The CSV file is
//! append-only with a single header so a crashed run still leaves a readable
//! log; the JSON file is written once at the end. Both carry exactly the
//! same rows, and [`read_csv`]/[`read_json`] invert their writers, so format
//! conversion is lossless: values travel as shortest round-trip decimals.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "run,epoch,step,metric,scope,value";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: String,
    pub epoch: u64,
    pub step: u64,
    pub metric: String,
    /// Layer or group the value belongs to; empty for run-level metrics.
    pub scope: String,
    pub value: f64,
}

/// Text fields share the CSV line with no quoting, so they must not contain
/// separators. All of ours are identifiers; anything else is a caller bug.
fn check_field(what: &str, s: &str) -> Result<()> {
    if s.contains([',', '\n', '\r', '"']) {
        return Err(Error::InvalidArgument(format!(
            "{what} {s:?} contains a CSV separator character"
        )));
    }
    Ok(())
}

fn format_row(row: &MetricsRow) -> Result<String> {
    check_field("run id", &row.run)?;
    check_field("metric name", &row.metric)?;
    check_field("scope", &row.scope)?;
    let mut line = String::new();
    // f64 Display is the shortest string that parses back to the same bits.
    let _ = write!(
        line,
        "{},{},{},{},{},{}",
        row.run, row.epoch, row.step, row.metric, row.scope, row.value
    );
    Ok(line)
}

fn parse_row(line: &str, lineno: usize) -> Result<MetricsRow> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(Error::Parse(format!(
            "metrics line {lineno}: expected 6 fields, got {}",
            fields.len()
        )));
    }
    let int = |s: &str, what: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| Error::Parse(format!("metrics line {lineno}: bad {what} {s:?}")))
    };
    let value: f64 = fields[5]
        .parse()
        .map_err(|_| Error::Parse(format!("metrics line {lineno}: bad value {:?}", fields[5])))?;
    Ok(MetricsRow {
        run: fields[0].to_string(),
        epoch: int(fields[1], "epoch")?,
        step: int(fields[2], "step")?,
        metric: fields[3].to_string(),
        scope: fields[4].to_string(),
        value,
    })
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format_row(row)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse(format!(
                "unexpected metrics header {header:?}"
            )))
        }
        None => return Err(Error::Parse("empty metrics file".into())),
    }
    lines
        .map(|(i, line)| parse_row(line, i + 1))
        .collect()
}

pub fn write_json(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::Parse(format!("metrics serialization: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Streams rows to `<dir>/metrics.csv` as they arrive (flushed on demand so
/// an aborted run keeps everything up to its last epoch) and mirrors them to
/// `<dir>/metrics.json` on [`MetricsWriter::finalize`].
pub struct MetricsWriter {
    csv: BufWriter<File>,
    json_path: PathBuf,
    rows: Vec<MetricsRow>,
    run: String,
}

impl MetricsWriter {
    pub fn create(dir: &Path, run: &str) -> Result<MetricsWriter> {
        check_field("run id", run)?;
        let csv_path = dir.join("metrics.csv");
        let mut csv = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&csv_path)?,
        );
        writeln!(csv, "{CSV_HEADER}")?;
        Ok(MetricsWriter {
            csv,
            json_path: dir.join("metrics.json"),
            rows: Vec::new(),
            run: run.to_string(),
        })
    }

    pub fn push(&mut self, epoch: u64, step: u64, metric: &str, scope: &str, value: f64) -> Result<()> {
        let row = MetricsRow {
            run: self.run.clone(),
            epoch,
            step,
            metric: metric.to_string(),
            scope: scope.to_string(),
            value,
        };
        writeln!(self.csv, "{}", format_row(&row)?)?;
        self.rows.push(row);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.csv.flush()?;
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Flushes the CSV and writes the JSON mirror.
    pub fn finalize(mut self) -> Result<Vec<MetricsRow>> {
        self.csv.flush()?;
        write_json(&self.json_path, &self.rows)?;
        Ok(self.rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<MetricsRow> {
        vec![
            MetricsRow {
                run: "r0".into(),
                epoch: 0,
                step: 12,
                metric: "train_loss".into(),
                scope: String::new(),
                value: 2.302585092994046,
            },
            MetricsRow {
                run: "r0".into(),
                epoch: 1,
                step: 24,
                metric: "statdiff".into(),
                scope: "layer3".into(),
                value: 1e-17,
            },
            MetricsRow {
                run: "r0".into(),
                epoch: 1,
                step: 24,
                metric: "val_err".into(),
                scope: String::new(),
                value: 0.5625,
            },
        ]
    }

    #[test]
    fn csv_and_json_round_trip_and_agree() {
        let dir = tempfile::tempdir().unwrap();
        let rows = sample_rows();
        let csv = dir.path().join("m.csv");
        let json = dir.path().join("m.json");
        write_csv(&csv, &rows).unwrap();
        write_json(&json, &rows).unwrap();
        let from_csv = read_csv(&csv).unwrap();
        let from_json = read_json(&json).unwrap();
        assert_eq!(from_csv, rows);
        assert_eq!(from_json, rows);
        // Bit-exact values across both formats.
        for (a, b) in from_csv.iter().zip(&from_json) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }

    #[test]
    fn writer_streams_csv_then_mirrors_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), "runA").unwrap();
        w.push(0, 5, "train_loss", "", 1.25).unwrap();
        w.flush().unwrap();
        // CSV already readable mid-run.
        let partial = read_csv(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(partial.len(), 1);
        assert_eq!(partial[0].metric, "train_loss");

        w.push(1, 10, "val_err", "", 0.125).unwrap();
        let rows = w.finalize().unwrap();
        let from_csv = read_csv(&dir.path().join("metrics.csv")).unwrap();
        let from_json = read_json(&dir.path().join("metrics.json")).unwrap();
        assert_eq!(from_csv, rows);
        assert_eq!(from_json, rows);
    }

    #[test]
    fn separator_in_identifier_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = MetricsWriter::create(dir.path(), "a,b").err().unwrap();
        assert!(err.to_string().contains("separator"), "{err}");

        let bad = MetricsRow {
            run: "r".into(),
            epoch: 0,
            step: 0,
            metric: "x\ny".into(),
            scope: String::new(),
            value: 0.0,
        };
        assert!(write_csv(&dir.path().join("m.csv"), &[bad]).is_err());
    }

    #[test]
    fn malformed_lines_are_reported_with_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, format!("{CSV_HEADER}\nr,0,0,m,,1.0\nr,0,0,m,\n")).unwrap();
        let err = read_csv(&path).err().unwrap().to_string();
        assert!(err.contains("line 3"), "{err}");

        std::fs::write(&path, "nope\n").unwrap();
        assert!(read_csv(&path).err().unwrap().to_string().contains("header"));
    }

    #[test]
    fn extreme_values_survive_shortest_repr() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows: Vec<MetricsRow> = [f64::MIN_POSITIVE, 1.0 + f64::EPSILON, 1e308, -0.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| MetricsRow {
                run: "r".into(),
                epoch: i as u64,
                step: 0,
                metric: "v".into(),
                scope: String::new(),
                value: v,
            })
            .collect();
        write_csv(&path, &rows).unwrap();
        let back = read_csv(&path).unwrap();
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }
}
