//! Training runs, sweeps, evaluation, checkpoints, and the files they leave
//! behind.
//!
//! A run directory holds:
//!
//! | file                    | content                                      |
//! |-------------------------|----------------------------------------------|
//! | `config.cfg`            | effective config in the key = value format   |
//! | `metrics.csv`           | one row per step, [`METRICS_HEADER`] columns |
//! | `decomposition.csv`     | optional full/noise gradient norms           |
//! | `checkpoints/*.ckpt`    | optional periodic checkpoints                |
//! | `final.ckpt`            | state after the last completed step          |
//! | `spectrum.json`         | optional Hessian spectrum at the end         |
//! | `run.json`              | the [`RunRecord`] manifest, written last     |

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{self, Dataset, RngSnapshot, Sampler, SamplerMode, SamplerSnapshot};
use crate::diagnostics::{self, SpectrumReport};
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, Targets};
use crate::numkit::{decompose_paper, lambda_from_gamma, EmaState, ParamVec};
use crate::optim::{self, LrSchedule, OptimizerState, StepData, Variant};
use crate::scalar::Scalar;

pub const METRICS_HEADER: &str =
    "step,lr,rho,train_loss,perturbed_loss,grad_norm,d_norm,perturb_norm,cosine_g_m,phi,test_loss,test_acc";
pub const DECOMPOSITION_HEADER: &str = "step,grad_norm,full_norm,full_component_norm,noise_norm,cosine";
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
pub const CHECKPOINT_MAGIC: &[u8; 13] = b"SHARPKIT-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

// Independent streams derived from the run / data seeds.
const SPLIT_SALT: u64 = 0x5311_7000;
const NOISE_SALT: u64 = 0x4015_e000;
const SAMPLER_SALT: u64 = 0x5a3b_1e00;
const OPTIM_SALT: u64 = 0x0b71_3000;

/// Model and data materialized from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub train: Dataset<f64>,
    pub test: Option<Dataset<f64>>,
}

/// Builds the model spec and the train / test split. The quadratic source
/// dictates its own (bias-free linear) model and has no test split.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let d = &config.data;
    let seed = config.data_seed();
    if d.source == DataSource::Quadratic {
        let (spec, batch) = model::quadratic_problem::<f64>(&d.eigenvalues)?;
        return Ok(Prepared { spec, train: Dataset::new(batch, 0)?, test: None });
    }
    let full = match d.source {
        DataSource::GaussianMixture => data::gen_gaussian_mixture(d.n, d.dim, d.classes, d.spread, seed)?,
        DataSource::TwoMoons => data::gen_two_moons(d.n, d.noise, seed)?,
        DataSource::LinearRegression => data::gen_linear_regression(d.n, d.dim, d.noise, seed)?,
        DataSource::Idx => data::load_idx(d.images.as_deref().unwrap(), d.labels.as_deref().unwrap())?,
        DataSource::Quadratic => unreachable!(),
    };
    let spec = config.model.spec();
    if spec.input_dim() != full.dim() {
        return Err(Error::Config(format!(
            "model input width {} does not match data dimension {}",
            spec.input_dim(),
            full.dim()
        )));
    }
    if full.class_count > 0 && spec.output_dim() < full.class_count {
        return Err(Error::Config(format!(
            "model has {} outputs for {} classes",
            spec.output_dim(),
            full.class_count
        )));
    }
    let (mut train, test) = full.split(d.test_fraction, seed ^ SPLIT_SALT)?;
    if d.label_noise > 0.0 {
        train = data::inject_label_noise(&train, d.label_noise, seed ^ NOISE_SALT)?;
    }
    Ok(Prepared { spec, train, test })
}

/// Mean loss (bit-identical to [`model::loss`]) and, for class targets,
/// argmax accuracy with ties going to the lowest class index.
pub fn evaluate<T: Scalar>(spec: &ModelSpec, params: &ParamVec<T>, examples: &Batch<T>) -> Result<(T, Option<f64>)> {
    let loss = model::loss(spec, params, examples)?;
    let Targets::Classes(labels) = &examples.targets else {
        return Ok((loss, None));
    };
    let outputs = model::predict(spec, params, examples)?;
    let correct = outputs
        .iter()
        .zip(labels)
        .filter(|(out, &y)| argmax(out) == y)
        .count();
    Ok((loss, Some(correct as f64 / labels.len() as f64)))
}

fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One line of `metrics.csv`; `None` fields are written empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub rho: f64,
    pub train_loss: f64,
    pub perturbed_loss: f64,
    pub grad_norm: f64,
    pub d_norm: f64,
    pub perturb_norm: f64,
    pub cosine_g_m: f64,
    pub phi: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.rho,
            self.train_loss,
            self.perturbed_loss,
            self.grad_norm,
            self.d_norm,
            self.perturb_norm,
            self.cosine_g_m,
            opt(self.phi),
            opt(self.test_loss),
            opt(self.test_acc),
        )
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVec<f64>,
    pub optimizer: OptimizerState<f64>,
    pub sampler: SamplerSnapshot,
    pub step: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn reals(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn rng(&mut self, s: &RngSnapshot) {
        self.0.extend_from_slice(&s.seed);
        self.u64(s.stream);
        self.u128(s.word_pos);
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.0.len() < N {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "checkpoint truncated",
            )));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        // Each element needs at least 8 bytes; reject lengths the file cannot hold.
        if n > self.0.len() / 8 {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "checkpoint truncated",
            )));
        }
        Ok(n)
    }
    fn reals(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn rng(&mut self) -> Result<RngSnapshot> {
        Ok(RngSnapshot { seed: self.take()?, stream: self.u64()?, word_pos: self.u128()? })
    }
}

/// Writes a checkpoint (via a temporary file and rename).
///
/// Layout: magic, `u32` version, `u64` step, then `u64`-length-prefixed
/// little-endian `f64` arrays for params, EMA, and momentum buffer, the EMA
/// lambda and update count, the optimizer's total steps and RNG position,
/// and the sampler's RNG position, mode, cursor, epoch, and permutation.
pub fn checkpoint_save(
    path: &Path,
    params: &ParamVec<f64>,
    optimizer: &OptimizerState<f64>,
    sampler: &SamplerSnapshot,
    step: u64,
) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(step);
    w.reals(params);
    w.reals(&optimizer.ema.m);
    w.reals(&optimizer.momentum_buffer);
    w.f64(optimizer.ema.lambda());
    w.u64(optimizer.ema.steps_seen);
    w.u64(optimizer.step);
    w.u64(optimizer.total_steps);
    w.rng(&RngSnapshot::capture(&optimizer.rng));
    w.rng(&sampler.rng);
    w.u8(match sampler.mode {
        SamplerMode::WithReplacement => 0,
        SamplerMode::EpochShuffle => 1,
    });
    w.u64(sampler.cursor as u64);
    w.u64(sampler.epoch);
    w.u64(sampler.permutation.len() as u64);
    sampler.permutation.iter().for_each(|&i| w.u64(i as u64));
    write_atomic(path, &w.0)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    checkpoint_decode(&bytes)
}

pub fn checkpoint_decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(bytes);
    let magic: [u8; 13] = r.take()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64()?;
    let params = ParamVec::from_vec(r.reals()?);
    let m = ParamVec::from_vec(r.reals()?);
    let momentum_buffer = ParamVec::from_vec(r.reals()?);
    if m.len() != params.len() || momentum_buffer.len() != params.len() {
        return Err(Error::Format("checkpoint arrays disagree in length".into()));
    }
    let lambda = r.f64()?;
    let steps_seen = r.u64()?;
    let opt_step = r.u64()?;
    let total_steps = r.u64()?;
    let opt_rng = r.rng()?;
    let sampler_rng = r.rng()?;
    let mode = match r.u8()? {
        0 => SamplerMode::WithReplacement,
        1 => SamplerMode::EpochShuffle,
        x => return Err(Error::Format(format!("unknown sampler mode {x}"))),
    };
    let cursor = r.u64()? as usize;
    let epoch = r.u64()?;
    let n = r.len()?;
    let permutation = (0..n).map(|_| r.u64().map(|i| i as usize)).collect::<Result<Vec<_>>>()?;
    if !r.0.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let ema = EmaState::from_parts(m, lambda, steps_seen).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint {
        params,
        optimizer: OptimizerState { ema, momentum_buffer, step: opt_step, total_steps, rng: opt_rng.restore() },
        sampler: SamplerSnapshot { rng: sampler_rng, mode, permutation, cursor, epoch },
        step,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, loss: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradEvalCounts {
    /// Minibatch gradient evaluations made by the optimizer.
    pub minibatch: u64,
    /// Full-dataset gradient evaluations made by the optimizer.
    pub full: u64,
    /// Per-example gradient evaluations made by the optimizer.
    pub examples: u64,
    /// Full-dataset gradient evaluations made only for logging.
    pub diagnostic_full: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
}

/// The run manifest (`run.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub build: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Effective config in the key = value format.
    pub config_text: String,
    pub config: ExperimentConfig,
    pub start_step: u64,
    pub steps_completed: u64,
    pub final_metrics: Option<FinalMetrics>,
    pub grad_evals: GradEvalCounts,
    pub wall_time_secs: f64,
    pub metrics_csv: PathBuf,
    pub decomposition_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub spectrum: Option<PathBuf>,
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.final_metrics.as_ref().and_then(|m| m.test_acc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_THRESHOLD
}

/// Runs the configured experiment in `config.run.out`.
///
/// A divergent run leaves its partial CSV and a failure manifest behind and
/// returns [`Error::Divergence`].
pub fn train(config: &ExperimentConfig) -> Result<RunRecord> {
    into_result(execute(config, None)?)
}

/// Continues a run from a checkpoint. The new `metrics.csv` holds the rows
/// after the checkpoint's step, identical to the uninterrupted run's.
pub fn resume(config: &ExperimentConfig, checkpoint: &Path) -> Result<RunRecord> {
    into_result(execute(config, Some(checkpoint_load(checkpoint)?))?)
}

fn into_result(record: RunRecord) -> Result<RunRecord> {
    match record.status {
        RunStatus::Completed => Ok(record),
        RunStatus::Diverged { step, loss } => Err(Error::Divergence { step, loss }),
    }
}

/// Like [`train`], but a divergent run is an `Ok` record with a
/// [`RunStatus::Diverged`] status.
pub fn execute(config: &ExperimentConfig, start: Option<Checkpoint>) -> Result<RunRecord> {
    let clock = Instant::now();
    let Prepared { spec, train, test } = prepare(config)?;
    let run = &config.run;
    let opt = &config.optimizer;
    let out = run.out.clone();
    fs::create_dir_all(&out)?;
    let config_text = config.to_text();
    fs::write(out.join("config.cfg"), &config_text)?;

    let (mut params, mut state, mut sampler, start_step) = match start {
        Some(ck) => {
            if ck.params.len() != spec.param_count() {
                return Err(Error::dim(spec.param_count(), ck.params.len()));
            }
            if ck.optimizer.total_steps != run.steps {
                return Err(Error::Config(format!(
                    "checkpoint was taken from a {}-step run, config asks for {}",
                    ck.optimizer.total_steps, run.steps
                )));
            }
            (ck.params, ck.optimizer, Sampler::from_snapshot(&ck.sampler), ck.step)
        }
        None => (
            model::init_params::<f64>(&spec, run.seed)?,
            OptimizerState::new(spec.param_count(), opt, run.steps, run.seed ^ OPTIM_SALT)?,
            Sampler::new(run.seed ^ SAMPLER_SALT, run.sampler),
            0,
        ),
    };

    let metrics_path = out.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let decomposition_path = run.log_decomposition.then(|| out.join("decomposition.csv"));
    let mut decomposition = match &decomposition_path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{DECOMPOSITION_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    if run.checkpoint_every > 0 {
        fs::create_dir_all(out.join("checkpoints"))?;
    }

    let n = train.len();
    let track_phi = run.track_phi && opt.variant.uses_ema();
    let diag_every = run.diag_every.max(1);
    let eval_every = run.eval_every;
    let mut counts = GradEvalCounts::default();
    let mut notes = Vec::new();
    if track_phi || run.log_decomposition {
        notes.push(format!(
            "full-gradient diagnostics every {diag_every} steps cost one pass over {n} examples each"
        ));
    }
    let mut status = RunStatus::Completed;
    let mut completed = start_step;

    for t in start_step..run.steps {
        let inner = sampler.sample_batch(n, run.batch_size)?;
        let batch = train.batch(&inner);
        let outer_batch = if opt.variant == Variant::SamStrength {
            let outer = data::extend_to_superset(&inner, n, opt.strength_k, &mut state.rng)?;
            Some(train.batch(&outer))
        } else {
            None
        };
        if let Some(w) = decomposition.as_mut().filter(|_| t % diag_every == 0) {
            let (_, g) = model::grad(&spec, &params, &batch)?;
            let full = model::full_grad(&spec, &params, &train.examples)?;
            counts.diagnostic_full += 1;
            let dec = decompose_paper(&full, &g)?;
            writeln!(
                w,
                "{t},{},{},{},{},{}",
                g.norm(),
                full.norm(),
                dec.full_component.norm(),
                dec.noise_component.norm(),
                dec.cosine
            )?;
        }
        let step_data = StepData {
            batch: &batch,
            dataset: opt.variant.needs_dataset().then_some(&train.examples),
            outer: outer_batch.as_ref(),
        };
        let (next, report) = optim::step(&spec, &params, step_data, opt, &mut state)?;
        counts.minibatch += u64::from(report.minibatch_evals);
        counts.full += u64::from(report.full_evals);
        counts.examples += report.extra_grad_evals;

        let phi = if track_phi && t % diag_every == 0 {
            counts.diagnostic_full += 1;
            Some(diagnostics::ema_error(&state.ema, &spec, &params, &train.examples)?)
        } else {
            None
        };
        params = next;
        completed = t + 1;

        let bad = [report.loss_at_w, report.loss_at_perturbed].into_iter().find(|&l| diverged(l));
        let eval_now = bad.is_none()
            && (completed == run.steps || (eval_every > 0 && completed % eval_every == 0));
        let (test_loss, test_acc) = match (&test, eval_now) {
            (Some(test), true) => {
                let (l, a) = evaluate(&spec, &params, &test.examples)?;
                (Some(l), a)
            }
            _ => (None, None),
        };
        let row = MetricsRow {
            step: t,
            lr: report.lr,
            rho: report.rho,
            train_loss: report.loss_at_w,
            perturbed_loss: report.loss_at_perturbed,
            grad_norm: report.grad_norm,
            d_norm: report.d_norm,
            perturb_norm: report.perturb_norm,
            cosine_g_m: report.cosine_g_m,
            phi,
            test_loss,
            test_acc,
        };
        writeln!(metrics, "{}", row.to_csv())?;
        if let Some(loss) = bad {
            status = RunStatus::Diverged { step: t, loss };
            break;
        }
        if run.checkpoint_every > 0 && completed % run.checkpoint_every == 0 {
            let path = out.join("checkpoints").join(format!("step-{completed}.ckpt"));
            checkpoint_save(&path, &params, &state, &sampler.snapshot(), completed)?;
        }
    }
    metrics.flush()?;
    if let Some(w) = decomposition.as_mut() {
        w.flush()?;
    }

    let mut checkpoint = None;
    let mut spectrum = None;
    let mut final_metrics = None;
    if status == RunStatus::Completed {
        let path = out.join("final.ckpt");
        checkpoint_save(&path, &params, &state, &sampler.snapshot(), completed)?;
        checkpoint = Some(path);
        let (train_loss, train_acc) = evaluate(&spec, &params, &train.examples)?;
        let (test_loss, test_acc) = match &test {
            Some(test) => {
                let (l, a) = evaluate(&spec, &params, &test.examples)?;
                (Some(l), a)
            }
            None => (None, None),
        };
        final_metrics = Some(FinalMetrics { train_loss, train_acc, test_loss, test_acc });
        if run.spectrum {
            let k = run.spectrum_k.min(params.len());
            let iters = if run.spectrum_iters == 0 { 5 * k } else { run.spectrum_iters.max(k) };
            let report = diagnostics::lanczos_spectrum(&spec, &params, &train.examples, k, iters, run.seed)?;
            let path = out.join("spectrum.json");
            write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            spectrum = Some(path);
        }
    }

    let record = RunRecord {
        build: BUILD_ID.to_string(),
        seed: run.seed,
        status,
        config_text,
        config: config.clone(),
        start_step,
        steps_completed: completed,
        final_metrics,
        grad_evals: counts,
        wall_time_secs: clock.elapsed().as_secs_f64(),
        metrics_csv: metrics_path,
        decomposition_csv: decomposition_path,
        checkpoint,
        spectrum,
        notes,
    };
    write_atomic(&out.join("run.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok(record)
}

/// Runs `jobs` at a time (`0` picks the number of available cores) and
/// returns results in input order.
pub fn run_all(configs: &[ExperimentConfig], jobs: usize) -> Result<Vec<RunRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| configs.par_iter().map(|c| execute(c, None)).collect())
}

keyword_enum!(SweepAxis {
    Rho => "rho",
    BatchSize => "batch_size",
    NoiseRate => "noise_rate",
    StrengthK => "strength_k",
    Gamma => "gamma",
});

impl SweepAxis {
    /// Sets this axis to `value` in `config`. The gamma axis sets the step
    /// size `lr = gamma` (constant schedule) and the matching EMA factor
    /// `lambda = 1 - gamma^(2/3)`.
    pub fn apply(self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{self} needs positive integer values, got {v}")))
            }
        };
        match self {
            SweepAxis::Rho => config.optimizer.rho = value,
            SweepAxis::BatchSize => config.run.batch_size = count(value)?,
            SweepAxis::NoiseRate => config.data.label_noise = value,
            SweepAxis::StrengthK => config.optimizer.strength_k = count(value)?,
            SweepAxis::Gamma => {
                config.optimizer.lambda = lambda_from_gamma(value, 1.0)?;
                config.optimizer.lr = value;
                config.optimizer.lr_schedule = LrSchedule::Constant;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seeds: Vec<u64>,
    pub completed: usize,
    pub diverged: usize,
    pub test_acc_mean: Option<f64>,
    pub test_acc_std: Option<f64>,
    pub train_loss_mean: Option<f64>,
    pub test_loss_mean: Option<f64>,
    pub run_dirs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

/// Every `value x seed` combination as its own run under
/// `out/<axis>=<value>/seed-<seed>`, plus `out/summary.json`.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<(Vec<RunRecord>, SweepSummary)> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let mut configs = Vec::with_capacity(values.len() * seeds.len());
    for &v in values {
        for &s in seeds {
            let mut c = base.clone();
            axis.apply(&mut c, v)?;
            c.run.seed = s;
            c.run.out = out.join(format!("{axis}={v}")).join(format!("seed-{s}"));
            c.validate()?;
            configs.push(c);
        }
    }
    let records = run_all(&configs, jobs)?;
    let points = values
        .iter()
        .zip(records.chunks(seeds.len()))
        .map(|(&value, runs)| summarize_point(value, seeds, runs))
        .collect();
    let summary = SweepSummary { axis, points };
    fs::create_dir_all(out)?;
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok((records, summary))
}

fn summarize_point(value: f64, seeds: &[u64], runs: &[RunRecord]) -> SweepPoint {
    let done: Vec<&FinalMetrics> = runs.iter().filter_map(|r| r.final_metrics.as_ref()).collect();
    let accs: Vec<f64> = done.iter().filter_map(|m| m.test_acc).collect();
    let train: Vec<f64> = done.iter().map(|m| m.train_loss).collect();
    let test: Vec<f64> = done.iter().filter_map(|m| m.test_loss).collect();
    let acc = mean_std(&accs);
    SweepPoint {
        value,
        seeds: seeds.to_vec(),
        completed: done.len(),
        diverged: runs.len() - done.len(),
        test_acc_mean: acc.map(|a| a.0),
        test_acc_std: acc.map(|a| a.1),
        train_loss_mean: mean_std(&train).map(|a| a.0),
        test_loss_mean: mean_std(&test).map(|a| a.0),
        run_dirs: runs.iter().map(|r| r.config.run.out.clone()).collect(),
    }
}

/// Variants compared by [`investigate`] besides the strength sweep.
pub const INVESTIGATED: [Variant; 5] =
    [Variant::Sgd, Variant::Sam, Variant::SamFull, Variant::SamDb, Variant::SamNoise];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvestigationEntry {
    /// Variant name, or `sam-strength-k<k>`.
    pub label: String,
    pub variant: Variant,
    pub strength_k: Option<usize>,
    pub seed: u64,
    pub status: RunStatus,
    pub final_metrics: Option<FinalMetrics>,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvestigationSummary {
    pub label: String,
    pub runs: usize,
    pub test_acc_mean: Option<f64>,
    pub test_acc_std: Option<f64>,
    pub train_loss_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Investigation {
    pub max_k: usize,
    pub seeds: Vec<u64>,
    pub entries: Vec<InvestigationEntry>,
    pub summary: Vec<InvestigationSummary>,
}

/// Runs SGD, SAM, SAM-full, SAM-db, SAM-noise, and SAM-strength with
/// `k = 1..=max_k` on the same config and seeds (hence the same data and
/// minibatch stream), writing `out/comparison.json`.
pub fn investigate(
    base: &ExperimentConfig,
    max_k: usize,
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<Investigation> {
    if seeds.is_empty() {
        return Err(Error::Config("investigate needs at least one seed".into()));
    }
    let mut arms: Vec<(String, Variant, Option<usize>)> =
        INVESTIGATED.iter().map(|&v| (v.to_string(), v, None)).collect();
    arms.extend((1..=max_k).map(|k| (format!("sam-strength-k{k}"), Variant::SamStrength, Some(k))));
    let mut configs = Vec::new();
    for (label, variant, k) in &arms {
        for &s in seeds {
            let mut c = base.clone();
            c.optimizer.variant = *variant;
            c.optimizer.strength_k = k.unwrap_or(1);
            c.run.seed = s;
            c.run.out = out.join(label).join(format!("seed-{s}"));
            c.validate()?;
            configs.push(c);
        }
    }
    let records = run_all(&configs, jobs)?;
    let mut entries = Vec::new();
    let mut summary = Vec::new();
    for ((label, variant, k), runs) in arms.iter().zip(records.chunks(seeds.len())) {
        for r in runs {
            entries.push(InvestigationEntry {
                label: label.clone(),
                variant: *variant,
                strength_k: *k,
                seed: r.seed,
                status: r.status.clone(),
                final_metrics: r.final_metrics.clone(),
                run_dir: r.config.run.out.clone(),
            });
        }
        let accs: Vec<f64> = runs.iter().filter_map(RunRecord::final_test_acc).collect();
        let train: Vec<f64> = runs.iter().filter_map(|r| r.final_metrics.as_ref().map(|m| m.train_loss)).collect();
        let acc = mean_std(&accs);
        summary.push(InvestigationSummary {
            label: label.clone(),
            runs: runs.len(),
            test_acc_mean: acc.map(|a| a.0),
            test_acc_std: acc.map(|a| a.1),
            train_loss_mean: mean_std(&train).map(|a| a.0),
        });
    }
    let report = Investigation { max_k, seeds: seeds.to_vec(), entries, summary };
    fs::create_dir_all(out)?;
    write_atomic(&out.join("comparison.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

/// Hessian spectrum of the training loss at a checkpoint of `config`'s run.
pub fn spectrum_at(config: &ExperimentConfig, checkpoint: &Checkpoint, k: usize, iters: usize) -> Result<SpectrumReport> {
    let prepared = prepare(config)?;
    if checkpoint.params.len() != prepared.spec.param_count() {
        return Err(Error::dim(prepared.spec.param_count(), checkpoint.params.len()));
    }
    diagnostics::lanczos_spectrum(&prepared.spec, &checkpoint.params, &prepared.train.examples, k, iters, config.run.seed)
}

/// Reads a metrics CSV into its rows, checking the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{}: unexpected metrics header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(Error::Format(format!("{}: row {} has {} fields", path.display(), i + 1, f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Format(format!("{}: bad number '{s}'", path.display())))
            };
            let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| Error::Format(format!("bad step '{}'", f[0])))?,
                lr: num(f[1])?,
                rho: num(f[2])?,
                train_loss: num(f[3])?,
                perturbed_loss: num(f[4])?,
                grad_norm: num(f[5])?,
                d_norm: num(f[6])?,
                perturb_norm: num(f[7])?,
                cosine_g_m: num(f[8])?,
                phi: opt(f[9])?,
                test_loss: opt(f[10])?,
                test_acc: opt(f[11])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn small(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.n = 120;
        c.model.layers = vec![2, 6, 2];
        c.run.steps = 30;
        c.run.batch_size = 8;
        c.run.eval_every = 10;
        c.run.out = out.to_path_buf();
        c
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn uniform_logits_pick_class_zero() {
        // Zero weights give equal logits; balanced 3-class data -> 1/3.
        let spec = ModelSpec::logistic(2, 3);
        let params = ParamVec::zeros(spec.param_count());
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let batch = Batch::new(vec![0.5; 18], 2, Targets::Classes(labels)).unwrap();
        let (loss, acc) = evaluate(&spec, &params, &batch).unwrap();
        assert_eq!(acc, Some(1.0 / 3.0));
        assert_eq!(loss, model::loss(&spec, &params, &batch).unwrap());
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_classifier() {
        // Identity logits on one-hot inputs.
        let spec = ModelSpec::logistic(2, 2).without_bias();
        let params = ParamVec::from_vec(vec![5.0, 0.0, 0.0, 5.0]);
        let batch = Batch::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 2, Targets::Classes(vec![0, 1, 0])).unwrap();
        assert_eq!(evaluate(&spec, &params, &batch).unwrap().1, Some(1.0));
    }

    #[test]
    fn regression_has_no_accuracy() {
        let (spec, batch) = model::quadratic_problem::<f64>(&[1.0, 2.0]).unwrap();
        assert_eq!(evaluate(&spec, &ParamVec::from_vec(vec![1.0, 1.0]), &batch).unwrap().1, None);
    }

    #[test]
    fn metrics_row_formatting() {
        let row = MetricsRow {
            step: 3,
            lr: 0.05,
            rho: 0.0,
            train_loss: 1.5,
            perturbed_loss: 1.5,
            grad_norm: 2.0,
            d_norm: 2.0,
            perturb_norm: 0.0,
            cosine_g_m: 0.0,
            phi: None,
            test_loss: Some(0.25),
            test_acc: None,
        };
        assert_eq!(row.to_csv(), "3,0.05,0,1.5,1.5,2,2,0,0,,0.25,");
        assert_eq!(row.to_csv().split(',').count(), METRICS_HEADER.split(',').count());
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let config = optim::OptimizerConfig::default();
        let mut state = OptimizerState::<f64>::new(3, &config, 40, 9).unwrap();
        state.ema.m = ParamVec::from_vec(vec![0.1, -0.2, f64::MIN_POSITIVE]);
        state.momentum_buffer = ParamVec::from_vec(vec![1e-300, 3.0, -0.0]);
        state.step = 17;
        let _: u64 = rand::Rng::random(&mut state.rng);
        let mut sampler = Sampler::new(4, SamplerMode::EpochShuffle);
        sampler.sample_batch(10, 3).unwrap();
        let params = ParamVec::from_vec(vec![std::f64::consts::PI, -1.0, 1e10]);
        checkpoint_save(&path, &params, &state, &sampler.snapshot(), 17).unwrap();
        let ck = checkpoint_load(&path).unwrap();
        assert_eq!(ck.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), params.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(ck.optimizer, state);
        assert_eq!(ck.sampler, sampler.snapshot());
        assert_eq!(ck.step, 17);

        let mut bytes = fs::read(&path).unwrap();
        assert!(matches!(checkpoint_decode(&bytes[..bytes.len() - 5]), Err(Error::Io(_))));
        assert!(matches!(checkpoint_decode(&bytes[..20]), Err(Error::Io(_))));
        bytes[13] = 99;
        assert!(matches!(checkpoint_decode(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(checkpoint_decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn train_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(dir.path());
        c.run.track_phi = true;
        c.run.log_decomposition = true;
        c.run.diag_every = 5;
        c.run.checkpoint_every = 10;
        let rec = train(&c).unwrap();
        assert!(rec.is_completed());
        let rows = read_metrics(&rec.metrics_csv).unwrap();
        assert_eq!(rows.len(), 30);
        assert_eq!(rows.iter().filter(|r| r.phi.is_some()).count(), 6);
        assert_eq!(rows.iter().filter(|r| r.test_acc.is_some()).map(|r| r.step).collect::<Vec<_>>(), vec![9, 19, 29]);
        let dec = fs::read_to_string(rec.decomposition_csv.as_ref().unwrap()).unwrap();
        assert_eq!(dec.lines().count(), 7);
        for s in [10, 20, 30] {
            assert!(dir.path().join(format!("checkpoints/step-{s}.ckpt")).exists());
        }
        assert!(rec.checkpoint.as_ref().unwrap().exists());
        let back = RunRecord::load(&dir.path().join("run.json")).unwrap();
        assert_eq!(back, rec);
        assert_eq!(ExperimentConfig::parse_text(&back.config_text).unwrap(), c);
        // fsam: two minibatch gradients per step, no full passes.
        assert_eq!(rec.grad_evals.minibatch, 60);
        assert_eq!(rec.grad_evals.full, 0);
        assert_eq!(rec.grad_evals.diagnostic_full, 12);
        let acc = rec.final_test_acc().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn sgd_fits_noise_free_regression() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(dir.path());
        c.data.source = DataSource::LinearRegression;
        c.data.noise = 0.0;
        c.data.dim = 3;
        c.model.kind = model::ModelKind::LinearRegression;
        c.model.layers = vec![3, 1];
        c.model.loss = model::LossKind::Mse;
        c.model.activation = Activation::Tanh;
        c.optimizer = optim::OptimizerConfig {
            variant: Variant::Sgd,
            lr: 0.05,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Constant,
            ..Default::default()
        };
        c.run.steps = 500;
        let rec = train(&c).unwrap();
        assert!(rec.final_metrics.unwrap().train_loss < 1e-4);
        assert_eq!(rec.grad_evals.minibatch, 500);
    }

    #[test]
    fn divergence_leaves_partial_csv_and_failure_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::default();
        c.data.source = DataSource::Quadratic;
        c.data.eigenvalues = vec![5.0, 2.0, 1.0];
        c.optimizer.variant = Variant::Sgd;
        c.optimizer.lr = 1e6;
        c.optimizer.lr_schedule = LrSchedule::Constant;
        c.run.batch_size = 3;
        c.run.steps = 100;
        c.run.out = dir.path().to_path_buf();
        let err = train(&c).unwrap_err();
        let Error::Divergence { step, .. } = err else { panic!("{err}") };
        let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows.len() as u64, step + 1);
        let rec = RunRecord::load(&dir.path().join("run.json")).unwrap();
        assert!(matches!(rec.status, RunStatus::Diverged { step: s, .. } if s == step));
        assert!(rec.final_metrics.is_none());
    }

    #[test]
    fn sweep_counts_and_rho_zero_collapse() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = small(dir.path());
        base.run.steps = 12;
        let (records, summary) = sweep(&base, SweepAxis::Rho, &[0.0, 0.05, 0.1], &[1, 2, 3, 4], dir.path(), 3).unwrap();
        assert_eq!(records.len(), 12);
        assert_eq!(summary.points.len(), 3);
        let csvs = walk_csvs(dir.path());
        assert_eq!(csvs, 12);
        assert!(dir.path().join("summary.json").exists());

        // Trajectory columns; d_norm and cosine_g_m describe the (unused) direction.
        let csv = |c: &ExperimentConfig| {
            let r = execute(c, None).unwrap();
            read_metrics(&r.metrics_csv)
                .unwrap()
                .iter()
                .map(|m| (m.step, m.lr, m.train_loss, m.perturbed_loss, m.grad_norm, m.perturb_norm, m.test_loss, m.test_acc))
                .collect::<Vec<_>>()
        };
        let mut sgd = base.clone();
        sgd.optimizer.variant = Variant::Sgd;
        sgd.run.out = dir.path().join("sgd");
        let reference = csv(&sgd);
        for v in [Variant::Sam, Variant::Fsam, Variant::SamFull, Variant::SamDb, Variant::SamNoise, Variant::SamStrength] {
            let mut c = base.clone();
            c.optimizer.variant = v;
            c.optimizer.rho = 0.0;
            c.optimizer.strength_k = if v == Variant::SamStrength { 2 } else { 1 };
            c.run.out = dir.path().join(v.as_str());
            assert_eq!(csv(&c), reference, "{v}");
        }
    }

    fn walk_csvs(dir: &Path) -> usize {
        fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| if p.is_dir() { walk_csvs(&p) } else { usize::from(p.file_name().unwrap() == "metrics.csv") })
            .sum()
    }

    #[test]
    fn parallel_sweep_matches_serial() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = small(dir.path());
        base.run.steps = 10;
        let (par, _) = sweep(&base, SweepAxis::BatchSize, &[4.0, 8.0], &[0, 1], &dir.path().join("p"), 4).unwrap();
        let (ser, _) = sweep(&base, SweepAxis::BatchSize, &[4.0, 8.0], &[0, 1], &dir.path().join("s"), 1).unwrap();
        for (a, b) in par.iter().zip(&ser) {
            assert_eq!(fs::read(&a.metrics_csv).unwrap(), fs::read(&b.metrics_csv).unwrap());
            assert_eq!(a.final_metrics, b.final_metrics);
        }
        assert!(SweepAxis::BatchSize.apply(&mut base, 2.5).is_err());
    }

    #[test]
    fn gamma_axis_sets_step_and_lambda() {
        let mut c = ExperimentConfig::default();
        SweepAxis::Gamma.apply(&mut c, 0.001).unwrap();
        assert_eq!(c.optimizer.lr, 0.001);
        assert!((c.optimizer.lambda - 0.99).abs() < 1e-12);
        assert_eq!(c.optimizer.lr_schedule, LrSchedule::Constant);
    }

    #[test]
    fn investigate_strength_one_is_sam() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = small(dir.path());
        base.run.steps = 10;
        let inv = investigate(&base, 2, &[5, 6], dir.path(), 2).unwrap();
        assert_eq!(inv.entries.len(), 7 * 2);
        assert_eq!(inv.summary.len(), 7);
        let dir_of = |label: &str, seed: u64| {
            inv.entries.iter().find(|e| e.label == label && e.seed == seed).unwrap().run_dir.join("metrics.csv")
        };
        for s in [5, 6] {
            assert_eq!(fs::read(dir_of("sam", s)).unwrap(), fs::read(dir_of("sam-strength-k1", s)).unwrap());
        }
        assert!(dir.path().join("comparison.json").exists());
    }

    #[test]
    fn read_metrics_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "step,loss\n0,1\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Format(_))));
    }
}
