//! Append-only run records and their CSV form.

use std::path::Path;

use crate::error::{LabError, Result};

pub const CSV_HEADER: [&str; 5] = ["step", "loss", "lr", "eval_name", "value"];

/// One CSV row. Training steps fill `loss` and `lr`; evaluations and
/// summary values fill `eval_name` and `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub step: usize,
    pub loss: Option<f64>,
    pub lr: Option<f64>,
    pub eval_name: Option<String>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    records: Vec<Record>,
    /// Seconds spent in `train`. Kept out of the CSV so that the file is a
    /// pure function of seed, config and data.
    pub wall_time: f64,
}

impl RunMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, step: usize, loss: f64, lr: f64) {
        self.records.push(Record {
            step,
            loss: Some(loss),
            lr: Some(lr),
            eval_name: None,
            value: None,
        });
    }

    pub fn value(&mut self, step: usize, name: &str, value: f64) {
        self.records.push(Record {
            step,
            loss: None,
            lr: None,
            eval_name: Some(name.to_string()),
            value: Some(value),
        });
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// `(step, loss)` for every training step.
    pub fn losses(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.loss.map(|l| (r.step, l)))
            .collect()
    }

    /// `(step, value)` for every record named `name`.
    pub fn series(&self, name: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.eval_name.as_deref() == Some(name))
            .filter_map(|r| r.value.map(|v| (r.step, v)))
            .collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.series(name).last().map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                fmt(r.loss),
                fmt(r.lr),
                r.eval_name.clone().unwrap_or_default(),
                fmt(r.value),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| LabError::io(path, e))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> LabError {
    LabError::Config(format!("csv: {e}"))
}

/// Render rows as a CSV string with the given header.
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Column-aligned plain text version of a table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
        out.push('\n');
    }
    out
}
