use std::path::{Path, PathBuf};
use std::time::Instant;

use con2em::data::{self, split_lodo, DomainDataset};
use con2em::training::{evaluate, fit, Instances, TrainConfig, TrainData};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{CliError, CliResult};
use crate::plot::{emit_plot_data, LogRow};
use crate::results::{mean_std, write_ndjson, ResultRow, ResultsTable};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

fn artifact_name(label: &str, seed: u64) -> String {
    format!("{label}-seed{seed}")
}

fn dataset_for(cfg: &ExperimentConfig, seed: u64) -> CliResult<DomainDataset> {
    let ds = cfg.dataset.build(cfg.data_seed.unwrap_or(seed))?;
    ds.domain(cfg.target_domain).map_err(|e| CliError::Config(format!("target_domain: {e}")))?;
    Ok(ds)
}

/// Result of one (variant, seed) job before it is written out.
struct Job {
    row: ResultRow,
    log: Vec<LogRow>,
    checkpoint: String,
}

fn run_job(variant: &Variant, ds: &DomainDataset, target: usize, seed: u64) -> CliResult<Job> {
    let started = Instant::now();
    let plan = split_lodo(ds, target, seed).map_err(|e| CliError::Config(e.to_string()))?;
    let data = TrainData::from_split(ds, &plan).map_err(|e| CliError::Config(e.to_string()))?;
    let config = TrainConfig { seed, ..variant.config.clone() };
    let out = fit(&data, config)?;
    let target_set = Instances::from_domain(ds, target, 0)?;
    let target_acc = evaluate(&out.best.model, &target_set)?;
    let best_val_acc = match out.best_val {
        Some(v) => v,
        None if data.val.is_empty() => f64::NAN,
        None => evaluate(&out.best.model, &data.val)?,
    };
    Ok(Job {
        row: ResultRow {
            method: variant.label.clone(),
            target,
            seed,
            target_acc,
            best_val_acc,
            best_iter: out.best.step,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        },
        log: out.log.iter().map(LogRow::from).collect(),
        checkpoint: out.best.to_json()?,
    })
}

/// Trains every (seed, variant) pair, evaluates on the held-out domain and
/// writes all artifacts under `dir`:
///
/// ```text
/// config.resolved.json
/// rows.ndjson  aggregate.ndjson  timings.ndjson
/// data/seed<S>.csv
/// logs/<variant>-seed<S>.ndjson
/// checkpoints/<variant>-seed<S>.json
/// ```
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> CliResult<ResultsTable> {
    run_with(cfg, dir, |_| {})
}

/// [`run`] with a callback invoked after each finished job.
pub fn run_with(cfg: &ExperimentConfig, dir: &Path, mut on_row: impl FnMut(&ResultRow)) -> CliResult<ResultsTable> {
    cfg.validate()?;
    let variants = cfg.variants()?;
    let datasets: Vec<(u64, DomainDataset)> =
        cfg.seeds.iter().map(|&s| dataset_for(cfg, s).map(|d| (s, d))).collect::<CliResult<_>>()?;

    for sub in ["data", "logs", "checkpoints"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let resolved = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Run(e.to_string()))?;
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), resolved + "\n")?;

    let mut table = ResultsTable::default();
    for (seed, ds) in &datasets {
        data::save(ds, &dir.join("data").join(format!("seed{seed}.csv")))?;
        for v in &variants {
            let job = run_job(v, ds, cfg.target_domain, *seed)?;
            let name = artifact_name(&v.label, *seed);
            write_ndjson(&dir.join("logs").join(format!("{name}.ndjson")), &job.log)?;
            std::fs::write(dir.join("checkpoints").join(format!("{name}.json")), job.checkpoint)?;
            on_row(&job.row);
            table.rows.push(job.row);
        }
    }
    table.save(dir)?;
    Ok(table)
}

/// Resolves the output root: explicit flag or environment first, then the
/// config's `out_dir`, then `runs`.
pub fn output_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf).or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
}

/// One sweep point summarized per (variant, target).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub method: String,
    pub target: usize,
    pub n: usize,
    pub mean_target_acc: f64,
    pub std_target_acc: f64,
}

pub const SWEEP_FILE: &str = "sweep.ndjson";

/// Directory-safe label of one sweep point, e.g. `lambda_mix=0.5`.
pub fn sweep_label(param: &str, value: f64) -> String {
    format!("{param}={value}")
}

/// Runs the experiment once per value of `param` (a `[train]` field). Each
/// point gets its own run directory under `dir/points/`, one mean curve file
/// `dir/curves/<param>=<value>.tsv` for the first variant, and a line in
/// `dir/sweep.ndjson`.
pub fn sweep(cfg: &ExperimentConfig, param: &str, values: &[f64], dir: &Path) -> CliResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let mut out = Vec::new();
    std::fs::create_dir_all(dir.join("curves"))?;
    for &value in values {
        let mut point = cfg.clone();
        point.train.insert(param.to_string(), sweep_value(param, value)?);
        point.base_train_config().map_err(|e| CliError::Config(format!("sweep over {param:?}: {e}")))?;
        let label = sweep_label(param, value);
        let table = run(&point, &dir.join("points").join(&label))?;

        let first = point.variants()?.remove(0).label;
        let logs: Vec<Vec<LogRow>> = point
            .seeds
            .iter()
            .map(|&s| {
                crate::results::read_ndjson(
                    &dir.join("points").join(&label).join("logs").join(format!("{}.ndjson", artifact_name(&first, s))),
                )
            })
            .collect::<CliResult<_>>()?;
        if let Some(curve) = mean_curve(&logs) {
            std::fs::write(dir.join("curves").join(format!("{label}.tsv")), emit_plot_data(&curve)?)?;
        }
        for a in table.aggregate() {
            out.push(SweepRow {
                param: param.to_string(),
                value,
                method: a.method,
                target: a.target,
                n: a.n,
                mean_target_acc: a.mean_target_acc,
                std_target_acc: a.std_target_acc,
            });
        }
    }
    write_ndjson(&dir.join(SWEEP_FILE), &out)?;
    Ok(out)
}

/// `value` typed like the matching [`TrainConfig`] field.
fn sweep_value(param: &str, value: f64) -> CliResult<toml::Value> {
    let defaults = toml::Table::try_from(TrainConfig::default()).map_err(|e| CliError::Run(e.to_string()))?;
    match defaults.get(param) {
        Some(toml::Value::Float(_)) => Ok(toml::Value::Float(value)),
        Some(toml::Value::Integer(_)) if value.fract() == 0.0 && value >= 0.0 => Ok(toml::Value::Integer(value as i64)),
        Some(toml::Value::Integer(_)) => Err(CliError::Config(format!("{param} takes whole numbers, got {value}"))),
        _ => Err(CliError::Config(format!("{param:?} is not a numeric training parameter"))),
    }
}

/// Row-wise mean of logs sharing their iteration grid.
fn mean_curve(logs: &[Vec<LogRow>]) -> Option<Vec<LogRow>> {
    let first = logs.first()?;
    if first.is_empty() || logs.iter().any(|l| l.len() != first.len()) {
        return None;
    }
    let n = logs.len() as f64;
    Some(
        (0..first.len())
            .map(|i| {
                let col = |f: fn(&LogRow) -> f64| mean_std(&logs.iter().map(|l| f(&l[i])).collect::<Vec<_>>()).0;
                let vals: Vec<f64> = logs.iter().filter_map(|l| l[i].val_acc).collect();
                LogRow {
                    iter: first[i].iter,
                    l_ins: col(|r| r.l_ins),
                    l_dis: col(|r| r.l_dis),
                    l_total: col(|r| r.l_total),
                    train_acc: col(|r| r.train_acc),
                    val_acc: (vals.len() as f64 == n).then(|| mean_std(&vals).0),
                }
            })
            .collect(),
    )
}
