use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ROWS_FILE: &str = "rows.ndjson";
pub const AGGREGATE_FILE: &str = "aggregate.ndjson";
pub const TIMINGS_FILE: &str = "timings.ndjson";

/// Outcome of one (method, target, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub target: usize,
    pub seed: u64,
    pub target_acc: f64,
    pub best_val_acc: f64,
    pub best_iter: usize,
    /// Kept out of the rows file so that it stays byte-identical across runs.
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Timing {
    method: String,
    target: usize,
    seed: u64,
    wall_ms: f64,
}

/// Mean and sample standard deviation per (method, target).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub target: usize,
    pub n: usize,
    pub mean_target_acc: f64,
    pub std_target_acc: f64,
    pub mean_val_acc: f64,
    pub std_val_acc: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Aggregates in order of first appearance of each (method, target).
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut order: Vec<(String, usize)> = Vec::new();
        let mut groups: BTreeMap<(String, usize), Vec<&ResultRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.target);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let (mt, st) = mean_std(&rows.iter().map(|r| r.target_acc).collect::<Vec<_>>());
                let (mv, sv) = mean_std(&rows.iter().map(|r| r.best_val_acc).collect::<Vec<_>>());
                Aggregate {
                    method: key.0,
                    target: key.1,
                    n: rows.len(),
                    mean_target_acc: mt,
                    std_target_acc: st,
                    mean_val_acc: mv,
                    std_val_acc: sv,
                }
            })
            .collect()
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn rows_for(&self, method: &str) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }

    /// Writes raw rows, the aggregate and the timings.
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        write_ndjson(&dir.join(ROWS_FILE), &self.rows)?;
        write_ndjson(&dir.join(AGGREGATE_FILE), &self.aggregate())?;
        let timings: Vec<Timing> = self
            .rows
            .iter()
            .map(|r| Timing { method: r.method.clone(), target: r.target, seed: r.seed, wall_ms: r.wall_ms })
            .collect();
        write_ndjson(&dir.join(TIMINGS_FILE), &timings)
    }

    /// Reads the rows (and timings, when present) written by [`save`](Self::save).
    pub fn load(dir: &Path) -> CliResult<Self> {
        let mut rows: Vec<ResultRow> = read_ndjson(&dir.join(ROWS_FILE))?;
        let timings_path = dir.join(TIMINGS_FILE);
        if timings_path.exists() {
            let timings: Vec<Timing> = read_ndjson(&timings_path)?;
            for r in &mut rows {
                if let Some(t) =
                    timings.iter().find(|t| t.method == r.method && t.target == r.target && t.seed == r.seed)
                {
                    r.wall_ms = t.wall_ms;
                }
            }
        }
        Ok(ResultsTable { rows })
    }

    /// Human-readable summary, accuracies in percent as `mean ± std`.
    pub fn render(&self) -> String {
        let aggs = self.aggregate();
        let width = aggs.iter().map(|a| a.method.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  target  n  target acc (%)   val acc (%)\n", "method");
        for a in aggs {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6}  {}  {:>6.1} ± {:<5.1}   {:>5.1} ± {:.1}",
                a.method,
                a.target,
                a.n,
                100.0 * a.mean_target_acc,
                100.0 * a.std_target_acc,
                100.0 * a.mean_val_acc,
                100.0 * a.std_val_acc
            );
        }
        s
    }
}

pub fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).map_err(|e| CliError::Run(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Paired differences `a - b` of target accuracy for one target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTarget {
    pub target: usize,
    pub seeds: Vec<u64>,
    pub diffs: Vec<f64>,
    pub mean_diff: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub method_a: String,
    pub method_b: String,
    pub targets: Vec<PairedTarget>,
}

impl CompareReport {
    pub fn render(&self) -> String {
        let mut s = format!("{} vs {}\n", self.method_a, self.method_b);
        for t in &self.targets {
            let _ = writeln!(
                s,
                "target {}: mean diff {:+.2} pts over {} seeds; a>b {}, a=b {}, a<b {}",
                t.target,
                100.0 * t.mean_diff,
                t.seeds.len(),
                t.wins,
                t.ties,
                t.losses
            );
        }
        s
    }
}

/// Pairs the rows of `method_a` in `a` with those of `method_b` in `b` by
/// (target, seed). Both sides must cover the same seeds for every target.
pub fn compare(a: &ResultsTable, method_a: &str, b: &ResultsTable, method_b: &str) -> CliResult<CompareReport> {
    let index = |t: &ResultsTable, m: &str| -> CliResult<BTreeMap<usize, BTreeMap<u64, f64>>> {
        let rows = t.rows_for(m);
        if rows.is_empty() {
            return Err(CliError::Config(format!("no rows for method {m:?}")));
        }
        let mut out: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
        for r in rows {
            out.entry(r.target).or_default().insert(r.seed, r.target_acc);
        }
        Ok(out)
    };
    let (ia, ib) = (index(a, method_a)?, index(b, method_b)?);
    if ia.keys().ne(ib.keys()) {
        return Err(CliError::Config(format!(
            "target sets differ: {:?} vs {:?}",
            ia.keys().collect::<Vec<_>>(),
            ib.keys().collect::<Vec<_>>()
        )));
    }
    let mut targets = Vec::new();
    for (target, sa) in &ia {
        let sb = &ib[target];
        if sa.keys().ne(sb.keys()) {
            return Err(CliError::Config(format!(
                "seed sets differ for target {target}: {:?} vs {:?}",
                sa.keys().collect::<Vec<_>>(),
                sb.keys().collect::<Vec<_>>()
            )));
        }
        let seeds: Vec<u64> = sa.keys().copied().collect();
        let diffs: Vec<f64> = seeds.iter().map(|s| sa[s] - sb[s]).collect();
        targets.push(PairedTarget {
            target: *target,
            mean_diff: diffs.iter().sum::<f64>() / diffs.len() as f64,
            wins: diffs.iter().filter(|&&d| d > 0.0).count(),
            ties: diffs.iter().filter(|&&d| d == 0.0).count(),
            losses: diffs.iter().filter(|&&d| d < 0.0).count(),
            seeds,
            diffs,
        });
    }
    Ok(CompareReport { method_a: method_a.into(), method_b: method_b.into(), targets })
}
