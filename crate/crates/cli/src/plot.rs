//! Per-step training logs and their plain-text curve files.
//!
//! A curve file is tab-separated with one header line (tabs shown as spaces):
//!
//! ```text
//! iter  l_ins  l_dis  l_total  train_acc  val_acc
//! 100   0.412  1.93   2.342    0.84375    0.9
//! ```
//!
//! `val_acc` is `nan` on rows logged without an evaluation.

use std::path::Path;

use con2em::training::TrainRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::results::read_ndjson;

pub const CURVE_COLUMNS: [&str; 6] = ["iter", "l_ins", "l_dis", "l_total", "train_acc", "val_acc"];

/// A [`TrainRecord`] without its wall time, so logs are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub l_ins: f64,
    pub l_dis: f64,
    pub l_total: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

impl From<&TrainRecord> for LogRow {
    fn from(r: &TrainRecord) -> Self {
        LogRow {
            iter: r.iter,
            l_ins: r.l_ins,
            l_dis: r.l_dis,
            l_total: r.l_total,
            train_acc: r.train_acc,
            val_acc: r.val_acc,
        }
    }
}

pub fn emit_plot_data(log: &[LogRow]) -> CliResult<String> {
    if log.is_empty() {
        return Err(CliError::Run("cannot plot an empty log".into()));
    }
    let mut out = CURVE_COLUMNS.join("\t");
    out.push('\n');
    for r in log {
        let val = r.val_acc.map_or_else(|| "nan".to_string(), |v| v.to_string());
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.iter, r.l_ins, r.l_dis, r.l_total, r.train_acc, val));
    }
    Ok(out)
}

/// Reads a curve file back into rows.
pub fn parse_plot_data(text: &str) -> CliResult<Vec<LogRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CliError::Config("empty curve file".into()))?;
    if header.split('\t').ne(CURVE_COLUMNS) {
        return Err(CliError::Config(format!("unexpected curve header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| CliError::Config(format!("line {}: {what}", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != CURVE_COLUMNS.len() {
                return Err(bad("wrong column count"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
            let val = num(f[5])?;
            Ok(LogRow {
                iter: f[0].parse().map_err(|_| bad("bad iteration"))?,
                l_ins: num(f[1])?,
                l_dis: num(f[2])?,
                l_total: num(f[3])?,
                train_acc: num(f[4])?,
                val_acc: (!val.is_nan()).then_some(val),
            })
        })
        .collect()
}

/// Converts a log file (NDJSON of [`LogRow`]) into a curve file.
pub fn emit_plot_file(log_path: &Path, out_path: &Path) -> CliResult<usize> {
    let rows: Vec<LogRow> = read_ndjson(log_path)?;
    let text = emit_plot_data(&rows)?;
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out_path, text)?;
    Ok(rows.len())
}
