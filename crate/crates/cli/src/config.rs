//! Experiment configuration: a single TOML file, optionally patched by
//! command-line overrides.
//!
//! ```toml
//! name = "moons-ablation"
//! method = "con2em"          # erm | erm_mixup | con2em
//! preset = "con2em"          # optional: con2em (batch 32) | con2em-l (batch 88)
//! ablate = ["table"]         # optional: no_dist_loss | no_dist_mixup | no_augment | table
//! seeds = [0, 1, 2, 3, 4]
//! target_domain = 3
//! out_dir = "runs"           # optional
//! data_seed = 7              # optional, defaults to each run seed
//!
//! [dataset]
//! generator = "rotated_moons"
//! angles = [0.0, 15.0, 30.0, 45.0]
//! n_per_domain = 200
//! noise_std = 0.1
//!
//! [train]                    # any TrainConfig field
//! lr = 1e-3
//! beta = 1.0
//!
//! [sweep]                    # optional, used by the `sweep` verb
//! param = "lambda_mix"
//! values = [0.1, 0.3, 0.5, 0.7, 0.9]
//! ```

use std::path::{Path, PathBuf};

use con2em::data::{self, DomainDataset};
use con2em::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    ErmMixup,
    Con2em,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::ErmMixup => "erm_mixup",
            Method::Con2em => "con2em",
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "erm" => Ok(Method::Erm),
            "erm_mixup" | "erm-mixup" => Ok(Method::ErmMixup),
            "con2em" => Ok(Method::Con2em),
            other => Err(CliError::Config(format!("unknown method {other:?} (expected erm, erm_mixup or con2em)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drop the distribution-level loss; resampling stays on.
    NoDistLoss,
    /// Drop the distribution mixup term.
    NoDistMixup,
    /// Drop resampled pseudo-instances.
    NoAugment,
    /// Run the four ablation rows: erm, without the distribution loss,
    /// without distribution mixup, and the full method.
    Table,
}

impl Ablation {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "no_dist_loss" | "no-dist-loss" => Ok(Ablation::NoDistLoss),
            "no_dist_mixup" | "no-dist-mixup" => Ok(Ablation::NoDistMixup),
            "no_augment" | "no-augment" => Ok(Ablation::NoAugment),
            "table" => Ok(Ablation::Table),
            other => Err(CliError::Config(format!(
                "unknown ablation {other:?} (expected no_dist_loss, no_dist_mixup, no_augment or table)"
            ))),
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Ablation::NoDistLoss => "no_dist_loss",
            Ablation::NoDistMixup => "no_dist_mixup",
            Ablation::NoAugment => "no_augment",
            Ablation::Table => "table",
        }
    }

    fn apply(self, cfg: TrainConfig) -> TrainConfig {
        match self {
            Ablation::NoDistLoss => TrainConfig { use_dist_loss: false, ..cfg },
            Ablation::NoDistMixup => TrainConfig { use_dist_mixup: false, ..cfg },
            Ablation::NoAugment => TrainConfig { use_resample: false, ..cfg },
            Ablation::Table => cfg,
        }
    }
}

/// Dataset section: a generator with its parameters, or a saved dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    ShiftedBlobs { n_domains: usize, n_classes: usize, n_per_cell: usize, input_dim: usize, shift_scale: f64 },
    RotatedMoons { angles: Vec<f64>, n_per_domain: usize, noise_std: f64 },
    CorrelationFlip { rates: Vec<f64>, n_per_domain: usize },
    File { path: PathBuf },
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> CliResult<DomainDataset> {
        let ds = match self {
            DatasetSpec::ShiftedBlobs { n_domains, n_classes, n_per_cell, input_dim, shift_scale } => {
                data::gen_shifted_blobs(*n_domains, *n_classes, *n_per_cell, *input_dim, *shift_scale, seed)
            }
            DatasetSpec::RotatedMoons { angles, n_per_domain, noise_std } => {
                data::gen_rotated_moons(angles, *n_per_domain, *noise_std, seed)
            }
            DatasetSpec::CorrelationFlip { rates, n_per_domain } => {
                data::gen_correlation_flip(rates, *n_per_domain, seed)
            }
            DatasetSpec::File { path } => data::load(path),
        };
        ds.map_err(|e| CliError::Config(format!("dataset: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub ablate: Vec<Ablation>,
    pub seeds: Vec<u64>,
    pub target_domain: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data_seed: Option<u64>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

/// One row of an ablation table: a label and the training configuration
/// (seed still unset).
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: TrainConfig,
}

/// Batch size of each preset.
pub fn preset_batch_size(name: &str) -> CliResult<usize> {
    match name {
        "con2em" => Ok(32),
        "con2em-l" => Ok(88),
        other => Err(CliError::Config(format!("unknown preset {other:?} (expected con2em or con2em-l)"))),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::Config(format!("name {:?} must be a plain non-empty file name", self.name)));
        }
        if !self.ablate.is_empty() && self.method != Method::Con2em {
            return Err(CliError::Config("ablation flags are only valid with method = \"con2em\"".into()));
        }
        if self.ablate.contains(&Ablation::Table) && self.ablate.len() > 1 {
            return Err(CliError::Config("the \"table\" ablation cannot be combined with other flags".into()));
        }
        for v in self.variants()? {
            v.config.validate().map_err(|e| CliError::Config(format!("train ({}): {e}", v.label)))?;
        }
        Ok(())
    }

    /// Defaults, then the preset, then the `[train]` table.
    pub fn base_train_config(&self) -> CliResult<TrainConfig> {
        let mut base = TrainConfig::default();
        if let Some(p) = &self.preset {
            base.batch_size = preset_batch_size(p)?;
        }
        let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
        for (k, v) in &self.train {
            table.insert(k.clone(), v.clone());
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("[train]: {}", e.message())))
    }

    pub fn variants(&self) -> CliResult<Vec<Variant>> {
        let base = self.base_train_config()?;
        let variant = |label: &str, config: TrainConfig| Variant { label: label.to_string(), config };
        Ok(match self.method {
            Method::Erm => vec![variant("erm", base.erm())],
            Method::ErmMixup => vec![variant("erm_mixup", base.erm_mixup())],
            Method::Con2em if self.ablate.contains(&Ablation::Table) => vec![
                variant("erm", base.clone().erm()),
                variant("con2em-no_dist_loss", Ablation::NoDistLoss.apply(base.clone())),
                variant("con2em-no_dist_mixup", Ablation::NoDistMixup.apply(base.clone())),
                variant("con2em", base),
            ],
            Method::Con2em => {
                let mut cfg = base;
                let mut label = "con2em".to_string();
                let mut flags = self.ablate.clone();
                flags.sort();
                for a in flags {
                    cfg = a.apply(cfg);
                    label = format!("{label}-{}", a.suffix());
                }
                vec![variant(&label, cfg)]
            }
        })
    }
}

/// Command-line patches applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub target: Option<usize>,
    pub method: Option<String>,
    pub ablate: Vec<String>,
    /// `key=value` pairs, with dotted keys into tables and TOML values.
    pub set: Vec<String>,
}

/// Line (1-based) of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config(text: &str, origin: &str, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        CliError::Config(format!("{origin}:{line}: {}", e.message()))
    })?;
    apply_overrides(&mut table, overrides)?;
    let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        // spans refer to the source text only when no override touched the table
        match e.span().filter(|_| overrides.is_empty()) {
            Some(s) => CliError::Config(format!("{origin}:{}: {}", line_of(text, s.start), e.message())),
            None => CliError::Config(format!("{origin}: {}", e.message())),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl Overrides {
    fn is_empty(&self) -> bool {
        self.seeds.is_empty()
            && self.target.is_none()
            && self.method.is_none()
            && self.ablate.is_empty()
            && self.set.is_empty()
    }
}

fn apply_overrides(table: &mut toml::Table, o: &Overrides) -> CliResult<()> {
    if !o.seeds.is_empty() {
        table.insert(
            "seeds".into(),
            toml::Value::Array(o.seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect()),
        );
    }
    if let Some(t) = o.target {
        table.insert("target_domain".into(), toml::Value::Integer(t as i64));
    }
    if let Some(m) = &o.method {
        table.insert("method".into(), toml::Value::String(Method::parse(m)?.name().into()));
    }
    if !o.ablate.is_empty() {
        let mut names = Vec::new();
        for a in &o.ablate {
            let parsed = Ablation::parse(a)?;
            names.push(toml::Value::String(parsed.suffix().into()));
        }
        table.insert("ablate".into(), toml::Value::Array(names));
    }
    for kv in &o.set {
        let (key, raw) =
            kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects key=value, got {kv:?}")))?;
        let value: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut parts: Vec<&str> = key.trim().split('.').collect();
        let last =
            parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in {kv:?}")))?;
        let mut cursor = &mut *table;
        for p in parts {
            let entry = cursor.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cursor = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("{p} in {key:?} is not a table")))?;
        }
        cursor.insert(last.to_string(), value);
    }
    Ok(())
}

/// Reads and validates a config file; a relative dataset `path` is taken
/// relative to the file's directory.
pub fn load_config(path: &Path, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text, &path.display().to_string(), overrides)?;
    if let DatasetSpec::File { path: data } = &mut cfg.dataset {
        if data.is_relative() {
            *data = path.parent().unwrap_or(Path::new(".")).join(&*data);
        }
    }
    Ok(cfg)
}
