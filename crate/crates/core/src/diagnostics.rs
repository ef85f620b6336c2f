//! Measurements used to check the optimizers' working assumptions: EMA
//! estimation error, expected orthogonality of the noise direction, the
//! friendly objective, one-step sharpness, and the top of the Hessian
//! spectrum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{all_minibatches, Dataset, Sampler, SamplerMode};
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec};
use crate::numkit::{perturbation, tau_zero, EmaState, ParamVec};
use crate::optim::{self, OptimizerConfig, OptimizerState, StepData};
use crate::scalar::Scalar;

/// Largest number of minibatches [`OrthogonalityMode::Enumerate`] will visit.
pub const MAX_ENUMERATED_BATCHES: u128 = 1_000_000;

/// `||m - grad L(w)||` over the whole example set.
pub fn ema_error<T: Scalar>(
    ema: &EmaState<T>,
    spec: &ModelSpec,
    params: &ParamVec<T>,
    examples: &Batch<T>,
) -> Result<T> {
    let full = model::full_grad(spec, params, examples)?;
    Ok(ema.m.sub(&full)?.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthogonalityMode {
    /// Average over every size-`b` subset.
    Enumerate,
    /// Average over uniformly drawn size-`b` subsets.
    Sample { trials: usize, seed: u64 },
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Mean and standard error over minibatches of `<g_B - g, g>` where `g` is
/// the full gradient.
pub fn orthogonality_stat<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    examples: &Batch<T>,
    b: usize,
    mode: OrthogonalityMode,
) -> Result<(T, T)> {
    let n = examples.len();
    if b == 0 || b > n {
        return Err(Error::Config(format!("minibatch size {b} outside [1, {n}]")));
    }
    let full = model::full_grad(spec, params, examples)?;
    let inner = |idx: &[usize]| -> Result<T> {
        let (_, g) = model::grad(spec, params, &examples.select(idx))?;
        g.sub(&full)?.dot(&full)
    };
    let values: Vec<T> = match mode {
        OrthogonalityMode::Enumerate => {
            if binomial(n, b) > MAX_ENUMERATED_BATCHES {
                return Err(Error::Config(format!(
                    "C({n}, {b}) minibatches exceed the enumeration limit"
                )));
            }
            all_minibatches(n, b).map(|idx| inner(&idx)).collect::<Result<_>>()?
        }
        OrthogonalityMode::Sample { trials, seed } => {
            if trials < 2 {
                return Err(Error::Config("sampling needs at least 2 trials".into()));
            }
            let mut sampler = Sampler::new(seed, SamplerMode::EpochShuffle);
            (0..trials)
                .map(|_| {
                    let (outer, _) = sampler.sample_nested(n, b, 1)?;
                    inner(&outer)
                })
                .collect::<Result<_>>()?
        }
    };
    let count = T::of_usize(values.len());
    let mean = values.iter().copied().sum::<T>() / count;
    let stderr = if values.len() > 1 {
        let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()
            / T::of_usize(values.len() - 1);
        (var / count).sqrt()
    } else {
        T::zero()
    };
    Ok((mean, stderr))
}

/// `L_B(w + eps) - sigma * L_S(w + eps)`.
pub fn friendly_objective<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    eps: &ParamVec<T>,
    batch: &Batch<T>,
    examples: &Batch<T>,
    sigma: T,
) -> Result<T> {
    let w = params.add(eps)?;
    Ok(model::loss(spec, &w, batch)? - sigma * model::loss(spec, &w, examples)?)
}

/// One-ascent-step estimate of the worst-case loss increase within radius
/// `rho`: `L(w + rho * g / ||g||) - L(w)` on `data`. May be negative.
pub fn sharpness_gap<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    data: &Batch<T>,
    rho: T,
) -> Result<T> {
    let (l0, g) = model::grad(spec, params, data)?;
    let eps = perturbation(&g, rho)?;
    Ok(model::loss(spec, &params.add(&eps)?, data)? - l0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Top Ritz values, descending.
    pub eigenvalues: Vec<f64>,
    pub lambda1: f64,
    /// `lambda_1 / lambda_5` when at least five values were found.
    pub ratio_1_5: Option<f64>,
    /// Fewer than `k` values could be produced.
    pub breakdown: bool,
    pub iterations: usize,
}

/// Lanczos on the finite-difference Hessian of the full-set loss with full
/// reorthogonalization. When the Krylov space becomes invariant, the
/// iteration restarts from a fresh random vector orthogonal to the basis
/// so that repeated eigenvalues are still resolved.
pub fn lanczos_spectrum<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    examples: &Batch<T>,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<SpectrumReport> {
    let dim = params.len();
    if k == 0 || k > dim {
        return Err(Error::Config(format!("k = {k} must lie in [1, {dim}]")));
    }
    if iters < k {
        return Err(Error::Config(format!("iters = {iters} must be >= k = {k}")));
    }
    let h = model::default_hvp_step(params);
    let op = |v: &ParamVec<T>| model::hvp(spec, params, examples, v, h);
    lanczos_with(op, dim, k, iters, seed)
}

/// Lanczos over an arbitrary symmetric operator.
pub fn lanczos_with<T: Scalar>(
    mut op: impl FnMut(&ParamVec<T>) -> Result<ParamVec<T>>,
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<SpectrumReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_unit = |basis: &[ParamVec<T>]| -> Option<ParamVec<T>> {
        let mut r = ParamVec::from_vec(
            (0..dim).map(|_| T::of(StandardNormal.sample(&mut rng))).collect::<Vec<_>>(),
        );
        let n0 = r.norm();
        reorthogonalize(&mut r, basis);
        let n = r.norm();
        (n > T::of(1e-8) * n0).then(|| r.scaled(T::one() / n))
    };

    let mut basis: Vec<ParamVec<T>> = Vec::new();
    let mut alphas: Vec<T> = Vec::new();
    let mut betas: Vec<T> = Vec::new();
    let mut q = random_unit(&basis).ok_or_else(|| Error::Domain("empty operator".into()))?;
    let mut breakdown = false;
    let steps = iters.min(dim);
    for j in 0..steps {
        let mut w = op(&q)?;
        let alpha = q.dot(&w)?;
        w.axpy(-alpha, &q)?;
        if let (Some(prev), Some(&beta)) = (basis.last(), betas.last()) {
            w.axpy(-beta, prev)?;
        }
        basis.push(q);
        reorthogonalize(&mut w, &basis);
        alphas.push(alpha);
        if j + 1 == steps {
            break;
        }
        let beta = w.norm();
        if beta < tau_zero() {
            match random_unit(&basis) {
                Some(r) => {
                    betas.push(T::zero());
                    q = r;
                }
                None => {
                    breakdown = true;
                    break;
                }
            }
        } else {
            betas.push(beta);
            q = w.scaled(T::one() / beta);
        }
    }
    let mut eigs: Vec<f64> = tridiagonal_eigenvalues(&alphas, &betas)
        .into_iter()
        .map(|x| x.as_f64())
        .collect();
    eigs.sort_by(|a, b| b.total_cmp(a));
    eigs.truncate(k);
    breakdown |= eigs.len() < k;
    let lambda1 = eigs.first().copied().unwrap_or(f64::NAN);
    let ratio_1_5 = eigs.get(4).map(|&l5| lambda1 / l5);
    Ok(SpectrumReport { eigenvalues: eigs, lambda1, ratio_1_5, breakdown, iterations: alphas.len() })
}

/// Two passes of classical Gram-Schmidt against `basis`.
fn reorthogonalize<T: Scalar>(v: &mut ParamVec<T>, basis: &[ParamVec<T>]) {
    for _ in 0..2 {
        for b in basis {
            let c = crate::numkit::dot(b, v);
            for (vi, &bi) in v.iter_mut().zip(b.iter()) {
                *vi -= c * bi;
            }
        }
    }
}

/// Number of eigenvalues of the symmetric tridiagonal matrix strictly below `x`
/// (Sturm sequence count).
fn count_below<T: Scalar>(diag: &[T], off: &[T], x: T) -> usize {
    let mut count = 0;
    let mut d = T::one();
    let tiny = T::min_positive_value();
    for i in 0..diag.len() {
        let b2 = if i == 0 { T::zero() } else { off[i - 1] * off[i - 1] };
        d = diag[i] - x - b2 / d;
        if d.abs() < tiny {
            d = -tiny;
        }
        if d < T::zero() {
            count += 1;
        }
    }
    count
}

/// All eigenvalues of a symmetric tridiagonal matrix by bisection, ascending.
pub fn tridiagonal_eigenvalues<T: Scalar>(diag: &[T], off: &[T]) -> Vec<T> {
    let n = diag.len();
    if n == 0 {
        return Vec::new();
    }
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for i in 0..n {
        let r = (if i > 0 { off[i - 1].abs() } else { T::zero() })
            + (if i + 1 < n { off[i].abs() } else { T::zero() });
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let span = (hi - lo).max(T::one());
    lo -= T::of(1e-3) * span;
    hi += T::of(1e-3) * span;
    (0..n)
        .map(|i| {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let mid = (a + b) / T::of(2.0);
                if mid <= a || mid >= b {
                    break;
                }
                if count_below(diag, off, mid) > i {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            (a + b) / T::of(2.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationTrace {
    pub steps: Vec<u64>,
    /// `||m_t - grad L(w_t)||` at each recorded step.
    pub phi: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

impl EstimationTrace {
    /// Mean of the last `fraction` of the recorded values.
    pub fn tail_mean(&self, fraction: f64) -> f64 {
        let n = self.phi.len();
        let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let tail = &self.phi[n - take.min(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Runs an EMA-tracking optimizer and records the EMA's distance to the full
/// gradient every `every` steps. `m_t` is compared against `grad L(w_t)` at
/// the point where it was updated.
pub fn estimation_trace<T: Scalar>(
    spec: &ModelSpec,
    init: &ParamVec<T>,
    train: &Dataset<T>,
    config: &OptimizerConfig,
    steps: u64,
    batch_size: usize,
    every: u64,
    seed: u64,
) -> Result<EstimationTrace> {
    if !config.variant.uses_ema() {
        return Err(Error::Config(format!("{} keeps no gradient EMA", config.variant)));
    }
    let mut sampler = Sampler::new(seed, SamplerMode::EpochShuffle);
    let mut state = OptimizerState::new(init.len(), config, steps, seed ^ 0x9e37_79b9)?;
    let mut params = init.clone();
    let mut trace = EstimationTrace {
        steps: Vec::new(),
        phi: Vec::new(),
        gamma: config.lr,
        lambda: config.lambda,
    };
    let every = every.max(1);
    for t in 0..steps {
        let idx = sampler.sample_batch(train.len(), batch_size)?;
        let batch = train.batch(&idx);
        let (next, _) = optim::step(spec, &params, StepData::batch(&batch), config, &mut state)?;
        if t % every == 0 {
            let phi = ema_error(&state.ema, spec, &params, &train.examples)?;
            trace.steps.push(t);
            trace.phi.push(phi.as_f64());
        }
        params = next;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;
    use crate::model::{quadratic_problem, Activation, LossKind, Targets};
    use crate::numkit::ema_update;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVec<f64> {
        ParamVec::from_vec(v.to_vec())
    }

    fn logistic_set(n: usize, seed: u64) -> (ModelSpec, Dataset<f64>, ParamVec<f64>) {
        let spec = ModelSpec::logistic(3, 3);
        let data = gen_gaussian_mixture(n, 3, 3, 1.5, seed).unwrap();
        let params = model::init_params(&spec, seed).unwrap();
        (spec, data, params)
    }

    #[test]
    fn ema_error_examples() {
        let (spec, data, w) = logistic_set(12, 1);
        let full = model::full_grad(&spec, &w, &data.examples).unwrap();
        let fresh = EmaState::new(w.len(), 0.9).unwrap();
        let e = ema_error(&fresh, &spec, &w, &data.examples).unwrap();
        assert!((e - full.norm()).abs() < 1e-15);
        let exact = EmaState::from_parts(full.clone(), 0.9, 1).unwrap();
        assert_eq!(ema_error(&exact, &spec, &w, &data.examples).unwrap(), 0.0);

        let one = data.subset(&[4]);
        let (_, g) = model::grad(&spec, &w, &one.examples).unwrap();
        let s = ema_update(&EmaState::new(w.len(), 0.0).unwrap(), &g).unwrap();
        assert_eq!(ema_error(&s, &spec, &w, &one.examples).unwrap(), 0.0);

        // Order of examples does not matter.
        let shuffled: Vec<usize> = (0..12).rev().collect();
        let s = EmaState::from_parts(pv(&vec![0.1; w.len()]), 0.9, 3).unwrap();
        let a = ema_error(&s, &spec, &w, &data.examples).unwrap();
        let b = ema_error(&s, &spec, &w, &data.examples.select(&shuffled)).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn orthogonality_enumerated_and_sampled() {
        let (spec, data, w) = logistic_set(8, 2);
        let g = model::full_grad(&spec, &w, &data.examples).unwrap();
        let scale = g.dot(&g).unwrap().max(1.0);
        let (mean, _) =
            orthogonality_stat(&spec, &w, &data.examples, 2, OrthogonalityMode::Enumerate).unwrap();
        assert!(mean.abs() < 1e-10 * scale, "{mean}");
        let (mean, se) =
            orthogonality_stat(&spec, &w, &data.examples, 8, OrthogonalityMode::Enumerate).unwrap();
        assert!(mean.abs() < 1e-15 && se == 0.0);

        let (spec, data, w) = logistic_set(60, 3);
        let (mean, se) = orthogonality_stat(
            &spec,
            &w,
            &data.examples,
            5,
            OrthogonalityMode::Sample { trials: 10_000, seed: 1 },
        )
        .unwrap();
        assert!(mean.abs() <= 4.0 * se, "{mean} vs {se}");
        assert!(orthogonality_stat(&spec, &w, &data.examples, 20, OrthogonalityMode::Enumerate).is_err());
    }

    #[test]
    fn friendly_objective_examples() {
        let (spec, data, w) = logistic_set(10, 4);
        let eps = pv(&vec![0.05; w.len()]);
        let v = friendly_objective(&spec, &w, &eps, &data.examples, &data.examples, 1.0).unwrap();
        assert_eq!(v, 0.0);
        let batch = data.batch(&[1, 2, 3]);
        let zero = ParamVec::zeros(w.len());
        let v = friendly_objective(&spec, &w, &zero, &batch, &data.examples, 0.0).unwrap();
        assert_eq!(v, model::loss(&spec, &w, &batch).unwrap());
    }

    #[test]
    fn noise_direction_beats_batch_gradient_on_friendly_objective() {
        // First-order oracle: the directional derivative of the friendly
        // objective along a unit vector u is <grad L_B - sigma grad L_S, u>,
        // maximized by the normalized noise direction. Measured here by
        // central differences of the objective itself.
        let spec = ModelSpec::mlp(vec![2, 5, 3], Activation::Tanh, LossKind::CrossEntropy);
        let data: Dataset<f64> = gen_gaussian_mixture(40, 2, 3, 2.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = 1e-5;
        for trial in 0..20 {
            let w: ParamVec<f64> = model::init_params(&spec, trial).unwrap();
            let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..40)).collect();
            let batch = data.batch(&idx);
            let (_, g) = model::grad(&spec, &w, &batch).unwrap();
            let full = model::full_grad(&spec, &w, &data.examples).unwrap();
            let d = g.sub(&full).unwrap();
            let slope = |u: &ParamVec<f64>| {
                let u = u.scaled(1.0 / u.norm());
                let f = |s: f64| friendly_objective(&spec, &w, &u.scaled(s), &batch, &data.examples, 1.0).unwrap();
                (f(t) - f(-t)) / (2.0 * t)
            };
            assert!(slope(&d) >= slope(&g) - 1e-7, "trial {trial}");
        }
    }

    #[test]
    fn sharpness_gap_on_quadratic() {
        let (spec, b) = quadratic_problem::<f64>(&[3.0, 1.0]).unwrap();
        let w = pv(&[1.0, 0.0]);
        assert_eq!(sharpness_gap(&spec, &w, &b, 0.0).unwrap(), 0.0);
        let gap = sharpness_gap(&spec, &w, &b, 0.1).unwrap();
        assert!((gap - 0.315).abs() < 1e-12, "{gap}");
        let mut prev = 0.0;
        for k in 1..20 {
            let g = sharpness_gap(&spec, &pv(&[0.4, -0.9]), &b, 0.05 * k as f64).unwrap();
            assert!(g > prev);
            prev = g;
        }
    }

    #[test]
    fn lanczos_on_diagonal_quadratics() {
        let (spec, b) = quadratic_problem::<f64>(&[5.0, 2.0, 1.0]).unwrap();
        let w = pv(&[0.2, -0.1, 0.3]);
        let r = lanczos_spectrum(&spec, &w, &b, 2, 3, 0).unwrap();
        assert!((r.eigenvalues[0] - 5.0).abs() < 1e-6 && (r.eigenvalues[1] - 2.0).abs() < 1e-6);
        assert_eq!(r.lambda1, r.eigenvalues[0]);
        assert!(!r.breakdown);

        let (spec, b) = quadratic_problem::<f64>(&[1.0; 4]).unwrap();
        let r = lanczos_spectrum(&spec, &ParamVec::zeros(4), &b, 4, 4, 3).unwrap();
        assert!(r.eigenvalues.iter().all(|e| (e - 1.0).abs() < 1e-6), "{:?}", r.eigenvalues);

        assert!(lanczos_spectrum(&spec, &ParamVec::zeros(4), &b, 5, 5, 0).is_err());
        assert!(lanczos_spectrum(&spec, &ParamVec::zeros(4), &b, 3, 2, 0).is_err());
    }

    #[test]
    fn lanczos_top_matches_power_iteration() {
        // Bias-free regression with dense random features: H = (2/n) X^T X.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d) = (9, 6);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = Batch::new(x.clone(), d, Targets::Real { values: vec![0.0; n], width: 1 }).unwrap();
        let spec = ModelSpec::linear_regression(d, 1).without_bias();
        let r = lanczos_spectrum(&spec, &ParamVec::zeros(d), &batch, 1, d, 5).unwrap();

        let h = |v: &[f64]| -> Vec<f64> {
            let xv: Vec<f64> = (0..n).map(|i| (0..d).map(|j| x[i * d + j] * v[j]).sum()).collect();
            (0..d).map(|j| 2.0 / n as f64 * (0..n).map(|i| x[i * d + j] * xv[i]).sum::<f64>()).collect()
        };
        let mut v = vec![1.0; d];
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let hv = h(&v);
            let norm = hv.iter().map(|a| a * a).sum::<f64>().sqrt();
            lambda = hv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            v = hv.iter().map(|a| a / norm).collect();
        }
        assert!((r.lambda1 - lambda).abs() < 1e-6, "{} vs {lambda}", r.lambda1);
    }

    #[test]
    fn lanczos_resolves_repeated_eigenvalues() {
        let (spec, b) = quadratic_problem::<f64>(&[5.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let r = lanczos_spectrum(&spec, &ParamVec::zeros(5), &b, 5, 5, 1).unwrap();
        let expect = [5.0, 2.0, 1.0, 1.0, 1.0];
        for (a, e) in r.eigenvalues.iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{:?}", r.eigenvalues);
        }
        assert!((r.ratio_1_5.unwrap() - 5.0).abs() < 1e-5);
    }

    #[test]
    fn tridiagonal_known_spectrum() {
        // Path-graph Laplacian-like matrix: diag 2, off -1; eigenvalues
        // 2 - 2 cos(k pi / (n + 1)).
        let n = 7;
        let eigs = tridiagonal_eigenvalues(&vec![2.0f64; n], &vec![-1.0; n - 1]);
        for (k, e) in eigs.iter().enumerate() {
            let exact = 2.0 - 2.0 * ((k + 1) as f64 * std::f64::consts::PI / (n + 1) as f64).cos();
            assert!((e - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_records_phi() {
        let (spec, data, w) = logistic_set(40, 6);
        let c = OptimizerConfig {
            variant: optim::Variant::Fsam,
            lr: 0.1,
            lr_schedule: optim::LrSchedule::Constant,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let tr = estimation_trace(&spec, &w, &data, &c, 20, 8, 5, 0).unwrap();
        assert_eq!(tr.steps, vec![0, 5, 10, 15]);
        assert!(tr.phi.iter().all(|p| *p >= 0.0));
        let sam = OptimizerConfig { variant: optim::Variant::Sam, ..c };
        assert!(estimation_trace(&spec, &w, &data, &sam, 20, 8, 5, 0).is_err());
    }
}
