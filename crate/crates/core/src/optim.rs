//! Base SGD and the sharpness-aware family built on it.
//!
//! Every variant evaluates the minibatch gradient `g` at the current point,
//! builds a perturbation `eps` from some direction, evaluates the minibatch
//! gradient again at `w + eps`, and hands that gradient to the same
//! momentum / coupled-L2 SGD update. Variants differ only in how `eps` is
//! chosen:
//!
//! | variant        | direction                                   |
//! |----------------|---------------------------------------------|
//! | `sam`          | `g`                                         |
//! | `fsam`         | `g - sigma * m` with `m` the EMA of `g`     |
//! | `asam`/`fasam` | as above, rescaled by `T_w = |w| + eta`     |
//! | `sam-full`     | full-dataset gradient                       |
//! | `sam-db`       | gradient of an independent batch            |
//! | `sam-noise`    | noise residual of `g` against the full grad |
//! | `sam-strength` | gradient of a superset batch `B' ⊇ B`       |

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec};
use crate::numkit::{
    cosine_similarity, decompose_paper, ema_update, perturbation, tau_zero, Decomposition,
    EmaState, ParamVec,
};
use crate::scalar::Scalar;

keyword_enum!(Variant {
    Sgd => "sgd",
    Sam => "sam",
    Fsam => "fsam",
    Asam => "asam",
    Fasam => "fasam",
    SamFull => "sam-full",
    SamDb => "sam-db",
    SamNoise => "sam-noise",
    SamStrength => "sam-strength",
});

keyword_enum!(SigmaMode {
    Constant => "constant",
    Cosine => "cosine",
});

keyword_enum!(LrSchedule {
    Constant => "constant",
    Cosine => "cosine",
    InvSqrtTotal => "inv-sqrt-total",
});

keyword_enum!(RhoSchedule {
    Constant => "constant",
    InvSqrtStep => "inv-sqrt-step",
});

impl Variant {
    pub fn uses_ema(self) -> bool {
        matches!(self, Variant::Fsam | Variant::Fasam)
    }

    pub fn needs_dataset(self) -> bool {
        matches!(self, Variant::SamFull | Variant::SamDb | Variant::SamNoise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub variant: Variant,
    /// Perturbation radius (rho_0 under a decaying schedule).
    pub rho: f64,
    /// EMA factor.
    pub lambda: f64,
    /// Projection constant.
    pub sigma: f64,
    pub sigma_mode: SigmaMode,
    pub momentum: f64,
    pub weight_decay: f64,
    pub strength_k: usize,
    pub lr_schedule: LrSchedule,
    pub rho_schedule: RhoSchedule,
    /// Base learning rate gamma_0.
    pub lr: f64,
    pub asam_eta: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            variant: Variant::Fsam,
            rho: 0.1,
            lambda: 0.9,
            sigma: 1.0,
            sigma_mode: SigmaMode::Constant,
            momentum: 0.9,
            weight_decay: 0.001,
            strength_k: 1,
            lr_schedule: LrSchedule::Cosine,
            rho_schedule: RhoSchedule::Constant,
            lr: 0.05,
            asam_eta: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn with_variant(variant: Variant) -> Self {
        OptimizerConfig { variant, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be finite and >= 0, got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !self.sigma.is_finite() {
            return bad("sigma must be finite".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.asam_eta >= 0.0 && self.asam_eta.is_finite()) {
            return bad(format!("asam_eta must be >= 0, got {}", self.asam_eta));
        }
        if self.strength_k == 0 {
            return bad("strength_k must be >= 1".into());
        }
        if self.strength_k != 1 && self.variant != Variant::SamStrength {
            return bad(format!("strength_k = {} is only valid with sam-strength", self.strength_k));
        }
        Ok(())
    }
}

/// Learning rate at step `t` (0-based) of a `total`-step run.
pub fn lr_at(config: &OptimizerConfig, t: u64, total: u64) -> f64 {
    let g0 = config.lr;
    match config.lr_schedule {
        LrSchedule::Constant => g0,
        LrSchedule::Cosine => {
            if total == 0 {
                return g0;
            }
            let frac = (t.min(total) as f64) / total as f64;
            g0 * (1.0 + (PI * frac).cos()) / 2.0
        }
        LrSchedule::InvSqrtTotal => g0 / (total.max(1) as f64).sqrt(),
    }
}

/// Perturbation radius at step `t`; the decaying schedule is shifted to
/// `rho_0 / sqrt(t + 1)` so that it is defined at `t = 0`.
pub fn rho_at(config: &OptimizerConfig, t: u64) -> f64 {
    match config.rho_schedule {
        RhoSchedule::Constant => config.rho,
        RhoSchedule::InvSqrtStep => config.rho / ((t + 1) as f64).sqrt(),
    }
}

/// Mutable per-run optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub ema: EmaState<T>,
    pub momentum_buffer: ParamVec<T>,
    pub step: u64,
    pub total_steps: u64,
    /// Private stream for draws made inside a step (extra batches).
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(dim: usize, config: &OptimizerConfig, total_steps: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            ema: EmaState::new(dim, T::of(config.lambda))?,
            momentum_buffer: ParamVec::zeros(dim),
            step: 0,
            total_steps,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

/// Diagnostics from one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<T> {
    pub step: u64,
    pub lr: f64,
    /// Radius actually applied (0 for plain SGD).
    pub rho: f64,
    pub loss_at_w: T,
    pub loss_at_perturbed: T,
    /// Norm of the minibatch gradient at `w`.
    pub grad_norm: T,
    /// Norm of the perturbation, measured in the variant's own geometry
    /// (`||T_w^-1 eps||` for the adaptive variants).
    pub perturb_norm: T,
    /// Norm of the direction the perturbation was built from.
    pub d_norm: T,
    /// Cosine between `g` and the estimate subtracted from it
    /// (`sigma * m`); 0 when nothing is subtracted.
    pub cosine_g_m: T,
    /// Per-example gradient evaluations spent beyond the minimization pass.
    pub extra_grad_evals: u64,
    pub minibatch_evals: u32,
    pub full_evals: u32,
    /// Present for the variants that decompose against the full gradient.
    pub decomposition: Option<Decomposition<T>>,
}

/// Data a step may draw on beyond its minibatch.
#[derive(Debug, Clone, Copy)]
pub struct StepData<'a, T> {
    pub batch: &'a Batch<T>,
    /// Whole training set (sam-full, sam-db, sam-noise).
    pub dataset: Option<&'a Batch<T>>,
    /// Superset batch (sam-strength).
    pub outer: Option<&'a Batch<T>>,
}

impl<'a, T> StepData<'a, T> {
    pub fn batch(batch: &'a Batch<T>) -> Self {
        StepData { batch, dataset: None, outer: None }
    }
}

struct Ascent<T> {
    eps: ParamVec<T>,
    d_norm: T,
    perturb_norm: T,
    cosine_g_m: T,
    extra_examples: u64,
    extra_minibatch: u32,
    full_evals: u32,
    decomposition: Option<Decomposition<T>>,
}

impl<T: Scalar> Ascent<T> {
    fn along(d: &ParamVec<T>, rho: T) -> Result<Self> {
        let eps = perturbation(d, rho)?;
        Ok(Ascent {
            perturb_norm: eps.norm(),
            eps,
            d_norm: d.norm(),
            cosine_g_m: T::zero(),
            extra_examples: 0,
            extra_minibatch: 0,
            full_evals: 0,
            decomposition: None,
        })
    }
}

struct Schedules<T> {
    t: u64,
    lr: f64,
    lr_t: T,
    rho: f64,
    rho_t: T,
}

fn schedules<T: Scalar>(config: &OptimizerConfig, state: &OptimizerState<T>) -> Schedules<T> {
    let t = state.step;
    let lr = lr_at(config, t, state.total_steps);
    let rho = rho_at(config, t);
    Schedules { t, lr, lr_t: T::of(lr), rho, rho_t: T::of(rho) }
}

/// Momentum SGD with coupled L2: `g += wd * w; buf = mu * buf + g; w -= lr * buf`.
fn base_update<T: Scalar>(
    params: &ParamVec<T>,
    grad: &ParamVec<T>,
    config: &OptimizerConfig,
    lr: T,
    state: &mut OptimizerState<T>,
) -> ParamVec<T> {
    let wd = T::of(config.weight_decay);
    let mu = T::of(config.momentum);
    let mut next = params.clone();
    for i in 0..params.len() {
        let g = grad[i] + wd * params[i];
        let b = mu * state.momentum_buffer[i] + g;
        state.momentum_buffer[i] = b;
        next[i] = params[i] - lr * b;
    }
    next
}

/// Second half shared by every perturbing variant.
fn descend<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
    sched: Schedules<T>,
    loss_at_w: T,
    g: &ParamVec<T>,
    ascent: Ascent<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let perturbed = params.add(&ascent.eps)?;
    let (loss_p, g_p) = model::grad(spec, &perturbed, batch)?;
    let next = base_update(params, &g_p, config, sched.lr_t, state);
    state.step += 1;
    let b = batch.len() as u64;
    Ok((
        next,
        StepReport {
            step: sched.t,
            lr: sched.lr,
            rho: sched.rho,
            loss_at_w,
            loss_at_perturbed: loss_p,
            grad_norm: g.norm(),
            perturb_norm: ascent.perturb_norm,
            d_norm: ascent.d_norm,
            cosine_g_m: ascent.cosine_g_m,
            extra_grad_evals: b + ascent.extra_examples,
            minibatch_evals: 2 + ascent.extra_minibatch,
            full_evals: ascent.full_evals,
            decomposition: ascent.decomposition,
        },
    ))
}

/// Plain momentum SGD. Reported as a zero-radius perturbation so its
/// metrics line up with the perturbing variants at `rho = 0`.
pub fn step_sgd<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, batch)?;
    let next = base_update(params, &g, config, sched.lr_t, state);
    state.step += 1;
    let gn = g.norm();
    Ok((
        next,
        StepReport {
            step: sched.t,
            lr: sched.lr,
            rho: 0.0,
            loss_at_w: loss,
            loss_at_perturbed: loss,
            grad_norm: gn,
            perturb_norm: T::zero(),
            d_norm: gn,
            cosine_g_m: T::zero(),
            extra_grad_evals: 0,
            minibatch_evals: 1,
            full_evals: 0,
            decomposition: None,
        },
    ))
}

pub fn step_sam<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, batch)?;
    let ascent = Ascent::along(&g, sched.rho_t)?;
    descend(spec, params, batch, config, state, sched, loss, &g, ascent)
}

/// Updates the EMA from `g` and returns `(g - sigma_eff * m, sigma_eff * m)`.
fn noise_estimate<T: Scalar>(
    g: &ParamVec<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, ParamVec<T>)> {
    state.ema = ema_update(&state.ema, g)?;
    let m = &state.ema.m;
    let sigma = match config.sigma_mode {
        SigmaMode::Constant => T::of(config.sigma),
        SigmaMode::Cosine => cosine_similarity(m, g)?,
    };
    let removed = m.scaled(sigma);
    Ok((g.sub(&removed)?, removed))
}

pub fn step_fsam<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, batch)?;
    let (d, removed) = noise_estimate(&g, config, state)?;
    let mut ascent = Ascent::along(&d, sched.rho_t)?;
    ascent.cosine_g_m = cosine_similarity(&g, &removed)?;
    descend(spec, params, batch, config, state, sched, loss, &g, ascent)
}

/// Adaptive perturbation `rho * T^2 d / ||T d||` with `T = diag(|w| + eta)`.
/// Returns the perturbation and `||T^-1 eps||`.
pub fn asam_perturbation<T: Scalar>(
    params: &ParamVec<T>,
    d: &ParamVec<T>,
    rho: T,
    eta: T,
) -> Result<(ParamVec<T>, T)> {
    params.check_len(d)?;
    let scale: Vec<T> = params.iter().map(|&w| w.abs() + eta).collect();
    let td = ParamVec::from_vec(scale.iter().zip(d.iter()).map(|(&s, &x)| s * x).collect());
    let n = td.norm();
    if rho == T::zero() || n < tau_zero() {
        return Ok((ParamVec::zeros(d.len()), T::zero()));
    }
    let c = rho / n;
    let eps = ParamVec::from_vec(scale.iter().zip(td.iter()).map(|(&s, &x)| c * s * x).collect());
    // T^-1 eps = c * T d
    Ok((eps, td.scaled(c).norm()))
}

fn adaptive_ascent<T: Scalar>(
    params: &ParamVec<T>,
    d: &ParamVec<T>,
    config: &OptimizerConfig,
    rho: T,
) -> Result<Ascent<T>> {
    let (eps, perturb_norm) = asam_perturbation(params, d, rho, T::of(config.asam_eta))?;
    let mut a = Ascent::along(d, T::zero())?;
    a.eps = eps;
    a.perturb_norm = perturb_norm;
    Ok(a)
}

pub fn step_asam<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, batch)?;
    let ascent = adaptive_ascent(params, &g, config, sched.rho_t)?;
    descend(spec, params, batch, config, state, sched, loss, &g, ascent)
}

pub fn step_fasam<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, batch)?;
    let (d, removed) = noise_estimate(&g, config, state)?;
    let mut ascent = adaptive_ascent(params, &d, config, sched.rho_t)?;
    ascent.cosine_g_m = cosine_similarity(&g, &removed)?;
    descend(spec, params, batch, config, state, sched, loss, &g, ascent)
}

pub fn step_sam_full<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    dataset: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, batch)?;
    let full = model::full_grad(spec, params, dataset)?;
    let mut ascent = Ascent::along(&full, sched.rho_t)?;
    ascent.extra_examples = dataset.len() as u64;
    ascent.full_evals = 1;
    descend(spec, params, batch, config, state, sched, loss, &g, ascent)
}

/// Perturbs along the gradient of an extra batch of the same size, drawn
/// with replacement from `dataset` using the optimizer's own stream.
pub fn step_sam_db<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    dataset: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, batch)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx = draw_extra_batch(&mut state.rng, dataset.len(), batch.len());
    let other = dataset.select(&idx);
    let (_, g_other) = model::grad(spec, params, &other)?;
    let mut ascent = Ascent::along(&g_other, sched.rho_t)?;
    ascent.extra_examples = other.len() as u64;
    ascent.extra_minibatch = 1;
    descend(spec, params, batch, config, state, sched, loss, &g, ascent)
}

/// Indices of the independent batch used by [`step_sam_db`].
pub fn draw_extra_batch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

pub fn step_sam_noise<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    dataset: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, batch)?;
    let full = model::full_grad(spec, params, dataset)?;
    let dec = decompose_paper(&full, &g)?;
    let mut ascent = Ascent::along(&dec.noise_component, sched.rho_t)?;
    ascent.extra_examples = dataset.len() as u64;
    ascent.full_evals = 1;
    ascent.decomposition = Some(dec);
    descend(spec, params, batch, config, state, sched, loss, &g, ascent)
}

/// Perturbs along the gradient of `outer` and descends on `inner`.
pub fn step_sam_strength<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    inner: &Batch<T>,
    outer: &Batch<T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    if outer.len() != config.strength_k * inner.len() {
        return Err(Error::Consistency(format!(
            "outer batch has {} examples, expected {} x {}",
            outer.len(),
            config.strength_k,
            inner.len()
        )));
    }
    let sched = schedules(config, state);
    let (loss, g) = model::grad(spec, params, inner)?;
    let (_, g_outer) = model::grad(spec, params, outer)?;
    let mut ascent = Ascent::along(&g_outer, sched.rho_t)?;
    ascent.extra_examples = outer.len() as u64;
    ascent.extra_minibatch = 0;
    ascent.full_evals = 0;
    let (next, mut report) = descend(spec, params, inner, config, state, sched, loss, &g, ascent)?;
    // The outer pass replaces one minibatch-sized evaluation.
    report.minibatch_evals = 2;
    Ok((next, report))
}

/// Dispatches on `config.variant`.
pub fn step<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    data: StepData<'_, T>,
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(ParamVec<T>, StepReport<T>)> {
    let need_dataset = || {
        data.dataset
            .ok_or_else(|| Error::Config(format!("{} needs the training set", config.variant)))
    };
    match config.variant {
        Variant::Sgd => step_sgd(spec, params, data.batch, config, state),
        Variant::Sam => step_sam(spec, params, data.batch, config, state),
        Variant::Fsam => step_fsam(spec, params, data.batch, config, state),
        Variant::Asam => step_asam(spec, params, data.batch, config, state),
        Variant::Fasam => step_fasam(spec, params, data.batch, config, state),
        Variant::SamFull => step_sam_full(spec, params, data.batch, need_dataset()?, config, state),
        Variant::SamDb => step_sam_db(spec, params, data.batch, need_dataset()?, config, state),
        Variant::SamNoise => step_sam_noise(spec, params, data.batch, need_dataset()?, config, state),
        Variant::SamStrength => {
            let outer = data
                .outer
                .ok_or_else(|| Error::Config("sam-strength needs an outer batch".into()))?;
            step_sam_strength(spec, params, data.batch, outer, config, state)
        }
    }
}
