//! `sharpkit` command-line front end.
//!
//! Exit codes: 0 success, 1 usage / config / I/O error, 2 numerical divergence.

mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sharpkit::config::ExperimentConfig;
use sharpkit::harness::{self, SweepAxis, METRICS_HEADER};
use sharpkit::optim::Variant;

use svg::{Bar, LinePanel, Series};

#[derive(Parser)]
#[command(name = "sharpkit", version, about = "Sharpness-aware optimizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file in the sectioned key = value format (defaults if omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set optimizer.rho=0.05` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        for assignment in &self.set {
            config.apply_override(assignment)?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its metrics, checkpoint, and manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides run.out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Allow writing into a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Grid over one axis and several seeds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// rho, batch_size, noise_rate, strength_k, or gamma.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        /// Number of seeds, counting up from run.seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Parallel runs (0 = available cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Compare SGD, SAM, SAM-full, SAM-db, SAM-noise, and SAM-strength k = 1..K.
    Investigate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        max_k: usize,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, default_value = "runs/investigate")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Top Hessian eigenvalues of the training loss at a checkpoint.
    Spectrum {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Lanczos iterations (default 5k).
        #[arg(long)]
        iters: Option<usize>,
        /// Run config (default: the config.cfg next to the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: `spectrum/` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Render metrics CSVs as an SVG line chart.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn prepare_out(dir: &Path, overwrite: bool) -> Result<()> {
    if !overwrite && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        bail!("output directory {} is not empty (pass --overwrite to reuse it)", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(cfg: &ConfigArgs, out: Option<PathBuf>, resume: Option<PathBuf>, overwrite: bool) -> Result<()> {
    let mut config = cfg.load()?;
    if let Some(out) = out {
        config.run.out = out;
    }
    config.validate()?;
    prepare_out(&config.run.out, overwrite)?;
    let record = match resume {
        Some(ckpt) => harness::resume(&config, &ckpt)?,
        None => harness::train(&config)?,
    };
    println!("{}", record.config.run.out.join("run.json").display());
    Ok(())
}

fn cmd_sweep(
    cfg: &ConfigArgs,
    axis: SweepAxis,
    values: &[f64],
    seeds: u64,
    jobs: usize,
    out: &Path,
    overwrite: bool,
) -> Result<()> {
    let base = cfg.load()?;
    prepare_out(out, overwrite)?;
    let seeds: Vec<u64> = (0..seeds).map(|i| base.run.seed + i).collect();
    let (_, summary) = harness::sweep(&base, axis, values, &seeds, out, jobs)?;
    let has_acc = summary.points.iter().any(|p| p.test_acc_mean.is_some());
    let series = if has_acc {
        let pts: Vec<_> = summary.points.iter().filter(|p| p.test_acc_mean.is_some()).collect();
        Series {
            name: format!("{} seed(s)", seeds.len()),
            points: pts.iter().map(|p| (p.value, p.test_acc_mean.unwrap())).collect(),
            errors: Some(pts.iter().map(|p| p.test_acc_std.unwrap_or(0.0)).collect()),
        }
    } else {
        Series {
            name: format!("{} seed(s)", seeds.len()),
            points: summary.points.iter().filter_map(|p| p.train_loss_mean.map(|l| (p.value, l))).collect(),
            errors: None,
        }
    };
    let y_label = if has_acc { "final test accuracy" } else { "final train loss" };
    let chart = svg::line_panels(&[LinePanel {
        title: format!("{y_label} vs {axis}"),
        x_label: axis.to_string(),
        y_label: y_label.into(),
        series: vec![series],
    }]);
    fs::write(out.join("sweep.svg"), chart)?;
    println!("{}", out.join("summary.json").display());
    Ok(())
}

fn cmd_investigate(cfg: &ConfigArgs, max_k: usize, seeds: u64, jobs: usize, out: &Path, overwrite: bool) -> Result<()> {
    let base = cfg.load()?;
    prepare_out(out, overwrite)?;
    let seeds: Vec<u64> = (0..seeds).map(|i| base.run.seed + i).collect();
    let report = harness::investigate(&base, max_k, &seeds, out, jobs)?;
    let metric = |s: &harness::InvestigationSummary| s.test_acc_mean.or(s.train_loss_mean).unwrap_or(f64::NAN);
    let y_label = if report.summary.iter().any(|s| s.test_acc_mean.is_some()) { "final test accuracy" } else { "final train loss" };
    let bars: Vec<Bar> = report
        .summary
        .iter()
        .map(|s| Bar { label: s.label.clone(), value: metric(s), error: s.test_acc_std })
        .collect();
    fs::write(out.join("comparison.svg"), svg::bar_chart("variant comparison", y_label, &bars))?;
    if max_k > 0 {
        let strength: Vec<(f64, f64)> = report
            .summary
            .iter()
            .filter_map(|s| s.label.strip_prefix("sam-strength-k").map(|k| (k.parse::<f64>().unwrap_or(f64::NAN), metric(s))))
            .collect();
        let sam = report.summary.iter().find(|s| s.label == Variant::Sam.as_str()).map(metric).unwrap_or(f64::NAN);
        let chart = svg::line_panels(&[LinePanel {
            title: "perturbation batch strength".into(),
            x_label: "k (perturbation batch = k x batch)".into(),
            y_label: y_label.into(),
            series: vec![
                Series { name: "sam-strength".into(), points: strength.clone(), errors: None },
                Series { name: "sam".into(), points: strength.iter().map(|&(k, _)| (k, sam)).collect(), errors: None },
            ],
        }]);
        fs::write(out.join("strength.svg"), chart)?;
    }
    println!("{}", out.join("comparison.json").display());
    Ok(())
}

fn find_config(ckpt: &Path) -> Result<PathBuf> {
    ckpt.ancestors()
        .skip(1)
        .take(2)
        .map(|dir| dir.join("config.cfg"))
        .find(|p| p.is_file())
        .ok_or_else(|| anyhow!("no config.cfg next to {}; pass --config", ckpt.display()))
}

fn cmd_spectrum(
    ckpt: &Path,
    k: usize,
    iters: Option<usize>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    overwrite: bool,
) -> Result<()> {
    let checkpoint = harness::checkpoint_load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let config_path = match config {
        Some(p) => p,
        None => find_config(ckpt)?,
    };
    let config = ExperimentConfig::load(&config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("spectrum"));
    let report = harness::spectrum_at(&config, &checkpoint, k, iters.unwrap_or(5 * k))?;
    prepare_out(&out, overwrite)?;
    write_json(&out.join("spectrum.json"), &report)?;
    let bars: Vec<Bar> = report
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &v)| Bar { label: format!("lambda{}", i + 1), value: v, error: None })
        .collect();
    fs::write(out.join("spectrum.svg"), svg::bar_chart("Hessian Ritz values", "eigenvalue", &bars))?;
    println!("{}", out.join("spectrum.json").display());
    Ok(())
}

/// Columns of a metrics CSV keyed by name; empty cells are dropped.
struct MetricsTable {
    columns: BTreeMap<String, Vec<(f64, f64)>>,
}

fn read_table(path: &Path) -> Result<MetricsTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let known: Vec<&str> = METRICS_HEADER.split(',').collect();
    let unknown: Vec<&&str> = header.iter().filter(|h| !known.contains(h)).collect();
    if !unknown.is_empty() || !header.contains(&"step") {
        bail!("{}: malformed metrics header (unknown columns {unknown:?} or no step column)", path.display());
    }
    for (i, h) in header.iter().enumerate() {
        if header[..i].contains(h) {
            bail!("{}: malformed metrics header (duplicate column {h})", path.display());
        }
    }
    let step_col = header.iter().position(|&h| h == "step").unwrap();
    let mut columns: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            bail!("{}: row {} has {} fields, header has {}", path.display(), row + 1, fields.len(), header.len());
        }
        let step: f64 = fields[step_col].trim().parse().with_context(|| format!("{}: bad step on row {}", path.display(), row + 1))?;
        for (name, value) in header.iter().zip(&fields) {
            if *name == "step" || value.trim().is_empty() {
                continue;
            }
            let v: f64 = value.trim().parse().with_context(|| format!("{}: bad {name} on row {}", path.display(), row + 1))?;
            columns.entry(name.to_string()).or_default().push((step, v));
        }
    }
    Ok(MetricsTable { columns })
}

fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if stem == "metrics" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn cmd_plot(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let tables: Vec<(String, MetricsTable)> =
        inputs.iter().map(|p| Ok((run_name(p), read_table(p)?))).collect::<Result<_>>()?;
    let panels: Vec<LinePanel> = [
        ("train_loss", "minibatch training loss"),
        ("test_loss", "test loss"),
        ("test_acc", "test accuracy"),
        ("phi", "EMA estimation error"),
        ("grad_norm", "minibatch gradient norm"),
    ]
    .iter()
    .filter_map(|&(col, title)| {
        let series: Vec<Series> = tables
            .iter()
            .filter_map(|(name, t)| {
                t.columns.get(col).map(|pts| Series { name: name.clone(), points: pts.clone(), errors: None })
            })
            .collect();
        (!series.is_empty()).then(|| LinePanel { title: title.into(), x_label: "step".into(), y_label: col.into(), series })
    })
    .collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, svg::line_panels(&panels)).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out, resume, overwrite } => cmd_train(&cfg, out, resume, overwrite),
        Command::Sweep { cfg, axis, values, seeds, jobs, out, overwrite } => {
            cmd_sweep(&cfg, axis, &values, seeds, jobs, &out, overwrite)
        }
        Command::Investigate { cfg, max_k, seeds, jobs, out, overwrite } => {
            cmd_investigate(&cfg, max_k, seeds, jobs, &out, overwrite)
        }
        Command::Spectrum { ckpt, k, iters, config, out, overwrite } => cmd_spectrum(&ckpt, k, iters, config, out, overwrite),
        Command::Plot { inputs, out } => cmd_plot(&inputs, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<sharpkit::Error>() {
                Some(sharpkit::Error::Divergence { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
