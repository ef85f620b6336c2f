//! Experiment configuration and its sectioned `key = value` text form.
//!
//! ```text
//! [model]
//! kind = mlp
//! layers = 2, 16, 2
//!
//! [optimizer]
//! variant = fsam
//! rho = 0.1
//! ```
//!
//! Every key has a default; unknown sections or keys are errors. Overrides
//! use `section.key=value` and are applied after the file is parsed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SamplerMode;
use crate::error::{Error, Result};
use crate::model::{Activation, LossKind, ModelKind, ModelSpec};
use crate::optim::OptimizerConfig;

keyword_enum!(DataSource {
    GaussianMixture => "gaussian-mixture",
    TwoMoons => "two-moons",
    LinearRegression => "linear-regression",
    Idx => "idx",
    Quadratic => "quadratic",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            layers: vec![2, 16, 2],
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
            bias: true,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            layer_sizes: self.layers.clone(),
            activation: self.activation,
            loss: self.loss,
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Radius of the class means (gaussian-mixture).
    pub spread: f64,
    /// Generator noise level (two-moons, linear-regression).
    pub noise: f64,
    /// Symmetric label-noise rate applied to the training split.
    pub label_noise: f64,
    pub test_fraction: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Hessian diagonal of the quadratic source.
    pub eigenvalues: Vec<f64>,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::TwoMoons,
            n: 1000,
            dim: 2,
            classes: 2,
            spread: 3.0,
            noise: 0.1,
            label_noise: 0.0,
            test_fraction: 0.2,
            images: None,
            labels: None,
            eigenvalues: Vec::new(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub seed: u64,
    pub sampler: SamplerMode,
    /// Log the EMA estimation error (EMA variants only).
    pub track_phi: bool,
    /// Log full-gradient decomposition norms to a side CSV.
    pub log_decomposition: bool,
    /// Period of the full-gradient diagnostics above.
    pub diag_every: u64,
    pub spectrum: bool,
    pub spectrum_k: usize,
    /// 0 selects `5 * spectrum_k`.
    pub spectrum_iters: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 1000,
            batch_size: 32,
            eval_every: 100,
            seed: 0,
            sampler: SamplerMode::EpochShuffle,
            track_phi: false,
            log_decomposition: false,
            diag_every: 50,
            spectrum: false,
            spectrum_k: 5,
            spectrum_iters: 0,
            checkpoint_every: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub run: RunConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{value}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Sets one key; `section` and `key` are matched exactly.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        let v = value.trim();
        let (m, d, o, r) = (&mut self.model, &mut self.data, &mut self.optimizer, &mut self.run);
        match (section, key) {
            ("model", "kind") => m.kind = v.parse()?,
            ("model", "layers") => m.layers = parse_list(k, v)?,
            ("model", "activation") => m.activation = v.parse()?,
            ("model", "loss") => m.loss = v.parse()?,
            ("model", "bias") => m.bias = parse_bool(k, v)?,

            ("data", "source") => d.source = v.parse()?,
            ("data", "n") => d.n = parse(k, v)?,
            ("data", "dim") => d.dim = parse(k, v)?,
            ("data", "classes") => d.classes = parse(k, v)?,
            ("data", "spread") => d.spread = parse(k, v)?,
            ("data", "noise") => d.noise = parse(k, v)?,
            ("data", "label_noise") => d.label_noise = parse(k, v)?,
            ("data", "test_fraction") => d.test_fraction = parse(k, v)?,
            ("data", "images") => d.images = opt_path(v),
            ("data", "labels") => d.labels = opt_path(v),
            ("data", "eigenvalues") => d.eigenvalues = parse_list(k, v)?,
            ("data", "seed") => d.seed = if v.is_empty() { None } else { Some(parse(k, v)?) },

            ("optimizer", "variant") => o.variant = v.parse()?,
            ("optimizer", "rho") => o.rho = parse(k, v)?,
            ("optimizer", "lambda") => o.lambda = parse(k, v)?,
            ("optimizer", "sigma") => o.sigma = parse(k, v)?,
            ("optimizer", "sigma_mode") => o.sigma_mode = v.parse()?,
            ("optimizer", "momentum") => o.momentum = parse(k, v)?,
            ("optimizer", "weight_decay") => o.weight_decay = parse(k, v)?,
            ("optimizer", "strength_k") => o.strength_k = parse(k, v)?,
            ("optimizer", "lr_schedule") => o.lr_schedule = v.parse()?,
            ("optimizer", "rho_schedule") => o.rho_schedule = v.parse()?,
            ("optimizer", "lr") => o.lr = parse(k, v)?,
            ("optimizer", "asam_eta") => o.asam_eta = parse(k, v)?,

            ("run", "steps") => r.steps = parse(k, v)?,
            ("run", "batch_size") => r.batch_size = parse(k, v)?,
            ("run", "eval_every") => r.eval_every = parse(k, v)?,
            ("run", "seed") => r.seed = parse(k, v)?,
            ("run", "sampler") => r.sampler = v.parse()?,
            ("run", "track_phi") => r.track_phi = parse_bool(k, v)?,
            ("run", "log_decomposition") => r.log_decomposition = parse_bool(k, v)?,
            ("run", "diag_every") => r.diag_every = parse(k, v)?,
            ("run", "spectrum") => r.spectrum = parse_bool(k, v)?,
            ("run", "spectrum_k") => r.spectrum_k = parse(k, v)?,
            ("run", "spectrum_iters") => r.spectrum_iters = parse(k, v)?,
            ("run", "checkpoint_every") => r.checkpoint_every = parse(k, v)?,
            ("run", "out") => r.out = PathBuf::from(v),

            _ => return Err(Error::Config(format!("unknown config key '{full}'"))),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key '{path}' is not section.key")))?;
        self.set(section, key, value)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "model" | "data" | "optimizer" | "run") {
                    return Err(Error::Config(format!(
                        "line {}: unknown section '{name}'",
                        lineno + 1
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let section = section.as_deref().ok_or_else(|| {
                Error::Config(format!("line {}: key outside of a section", lineno + 1))
            })?;
            cfg.set(section, key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Text form listing every key; parses back to an identical config.
    pub fn to_text(&self) -> String {
        let (m, d, o, r) = (&self.model, &self.data, &self.optimizer, &self.run);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "kind = {}", m.kind);
        let _ = writeln!(s, "layers = {}", join(&m.layers));
        let _ = writeln!(s, "activation = {}", m.activation);
        let _ = writeln!(s, "loss = {}", m.loss);
        let _ = writeln!(s, "bias = {}", m.bias);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "source = {}", d.source);
        let _ = writeln!(s, "n = {}", d.n);
        let _ = writeln!(s, "dim = {}", d.dim);
        let _ = writeln!(s, "classes = {}", d.classes);
        let _ = writeln!(s, "spread = {}", d.spread);
        let _ = writeln!(s, "noise = {}", d.noise);
        let _ = writeln!(s, "label_noise = {}", d.label_noise);
        let _ = writeln!(s, "test_fraction = {}", d.test_fraction);
        let _ = writeln!(s, "images = {}", path(&d.images));
        let _ = writeln!(s, "labels = {}", path(&d.labels));
        let _ = writeln!(s, "eigenvalues = {}", join(&d.eigenvalues));
        let _ = writeln!(s, "seed = {}", d.seed.map(|x| x.to_string()).unwrap_or_default());
        let _ = writeln!(s, "\n[optimizer]");
        let _ = writeln!(s, "variant = {}", o.variant);
        let _ = writeln!(s, "rho = {}", o.rho);
        let _ = writeln!(s, "lambda = {}", o.lambda);
        let _ = writeln!(s, "sigma = {}", o.sigma);
        let _ = writeln!(s, "sigma_mode = {}", o.sigma_mode);
        let _ = writeln!(s, "momentum = {}", o.momentum);
        let _ = writeln!(s, "weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "strength_k = {}", o.strength_k);
        let _ = writeln!(s, "lr_schedule = {}", o.lr_schedule);
        let _ = writeln!(s, "rho_schedule = {}", o.rho_schedule);
        let _ = writeln!(s, "lr = {}", o.lr);
        let _ = writeln!(s, "asam_eta = {}", o.asam_eta);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "steps = {}", r.steps);
        let _ = writeln!(s, "batch_size = {}", r.batch_size);
        let _ = writeln!(s, "eval_every = {}", r.eval_every);
        let _ = writeln!(s, "seed = {}", r.seed);
        let _ = writeln!(s, "sampler = {}", r.sampler);
        let _ = writeln!(s, "track_phi = {}", r.track_phi);
        let _ = writeln!(s, "log_decomposition = {}", r.log_decomposition);
        let _ = writeln!(s, "diag_every = {}", r.diag_every);
        let _ = writeln!(s, "spectrum = {}", r.spectrum);
        let _ = writeln!(s, "spectrum_k = {}", r.spectrum_k);
        let _ = writeln!(s, "spectrum_iters = {}", r.spectrum_iters);
        let _ = writeln!(s, "checkpoint_every = {}", r.checkpoint_every);
        let _ = writeln!(s, "out = {}", r.out.display());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.spec().validate()?;
        self.optimizer.validate()?;
        let d = &self.data;
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} outside [0, 1)", d.test_fraction)));
        }
        if !(0.0..=1.0).contains(&d.label_noise) {
            return Err(Error::Config(format!("label_noise {} outside [0, 1]", d.label_noise)));
        }
        if d.source == DataSource::Idx && (d.images.is_none() || d.labels.is_none()) {
            return Err(Error::Config("idx source needs data.images and data.labels".into()));
        }
        if d.source == DataSource::Quadratic && d.eigenvalues.is_empty() {
            return Err(Error::Config("quadratic source needs data.eigenvalues".into()));
        }
        let r = &self.run;
        if r.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if r.spectrum && r.spectrum_k == 0 {
            return Err(Error::Config("spectrum_k must be positive".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.run.seed)
    }
}
