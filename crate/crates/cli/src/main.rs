use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use con2em_cli::{
    compare, emit_plot_file, load_config, output_root, run_with, sweep, CliError, CliResult, ExperimentConfig,
    Overrides, ResultsTable, OUT_ENV,
};

/// Leave-one-domain-out experiments with class-conditional distribution augmentation.
#[derive(Parser)]
#[command(name = "con2em", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured seed and variant.
    Run(RunArgs),
    /// Paired per-seed comparison of two methods.
    Compare(CompareArgs),
    /// Repeat a run for each value of one training parameter.
    Sweep(SweepArgs),
    /// Turn training logs into tab-separated curve files.
    EmitPlotData(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the seed list; repeat for several seeds.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Held-out domain id.
    #[arg(long)]
    target: Option<usize>,
    /// erm, erm_mixup or con2em.
    #[arg(long)]
    method: Option<String>,
    /// no_dist_loss, no_dist_mixup, no_augment or table; repeatable.
    #[arg(long)]
    ablate: Vec<String>,
    /// Patch any config key, e.g. `--set train.lr=1e-3`; repeatable.
    #[arg(long)]
    set: Vec<String>,
    /// Output root; the run directory is `<out>/<name>`.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let overrides = Overrides {
            seeds: self.seeds.clone(),
            target: self.target,
            method: self.method.clone(),
            ablate: self.ablate.clone(),
            set: self.set.clone(),
        };
        load_config(&self.config, &overrides)
    }

    fn run_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        output_root(self.out.as_deref(), cfg).join(&cfg.name)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directory holding the first results.
    a: PathBuf,
    /// Run directory holding the second results; defaults to the first.
    b: Option<PathBuf>,
    /// Method taken from the first results (default: its last method).
    #[arg(long)]
    method_a: Option<String>,
    /// Method taken from the second results (default: its first method).
    #[arg(long)]
    method_b: Option<String>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training parameter to vary (overrides the config's [sweep] section).
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

#[derive(Args)]
struct PlotArgs {
    /// A log file (`.ndjson`) or a run directory with a `logs/` folder.
    input: PathBuf,
    /// Output file for a single log, or output directory for a run.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let cfg = args.config.load()?;
    let dir = args.config.run_dir(&cfg);
    eprintln!("writing {}", dir.display());
    let table = run_with(&cfg, &dir, |r| {
        eprintln!("  {} seed {}: target {:.4} (val {:.4})", r.method, r.seed, r.target_acc, r.best_val_acc);
    })?;
    print!("{}", table.render());
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let a = ResultsTable::load(&args.a)?;
    let b = match &args.b {
        Some(p) => ResultsTable::load(p)?,
        None => a.clone(),
    };
    let pick = |t: &ResultsTable, explicit: &Option<String>, last: bool| -> CliResult<String> {
        if let Some(m) = explicit {
            return Ok(m.clone());
        }
        let methods = t.methods();
        let m = if last { methods.last() } else { methods.first() };
        m.cloned().ok_or_else(|| CliError::Config("results hold no rows".into()))
    };
    let (ma, mb) = (pick(&a, &args.method_a, true)?, pick(&b, &args.method_b, false)?);
    let report = compare(&a, &ma, &b, &mb)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?);
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let cfg = args.config.load()?;
    let (param, values) = match (&args.param, &cfg.sweep) {
        (Some(p), _) => (p.clone(), args.values.clone()),
        (None, Some(s)) => {
            (s.param.clone(), if args.values.is_empty() { s.values.clone() } else { args.values.clone() })
        }
        (None, None) => {
            return Err(CliError::Config("no sweep parameter: pass --param or add a [sweep] section".into()))
        }
    };
    let dir = args.config.run_dir(&cfg);
    eprintln!("writing {}", dir.display());
    let rows = sweep(&cfg, &param, &values, &dir)?;
    for r in rows {
        println!(
            "{}={:<6} {:<24} target {}  {:.1} ± {:.1}",
            r.param,
            r.value,
            r.method,
            r.target,
            100.0 * r.mean_target_acc,
            100.0 * r.std_target_acc
        );
    }
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> CliResult<()> {
    if args.input.is_dir() {
        let logs = args.input.join("logs");
        let out = args.out.clone().unwrap_or_else(|| args.input.join("curves"));
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&logs)
            .map_err(|e| CliError::Config(format!("{}: {e}", logs.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(CliError::Config(format!("no logs in {}", logs.display())));
        }
        for log in entries {
            let target = out.join(log.with_extension("tsv").file_name().expect("file"));
            let n = emit_plot_file(&log, &target)?;
            println!("{} ({n} rows)", target.display());
        }
    } else {
        let target = args.out.clone().unwrap_or_else(|| args.input.with_extension("tsv"));
        let n = emit_plot_file(&args.input, &target)?;
        println!("{} ({n} rows)", target.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::EmitPlotData(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
