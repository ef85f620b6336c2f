//! Dense-vector primitives, gradient decomposition, EMA tracking, and
//! perturbation normalization.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Absolute l2-norm threshold below which a direction is treated as zero.
pub const TAU_ZERO: f64 = 1e-12;

#[inline]
pub fn tau_zero<T: Scalar>() -> T {
    T::of(TAU_ZERO)
}

/// Flat parameter-shaped vector: weights, gradients, perturbations, EMA buffers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVec<T>(Vec<T>);

impl<T: Scalar> ParamVec<T> {
    pub fn zeros(len: usize) -> Self {
        ParamVec(vec![T::zero(); len])
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        ParamVec(values)
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn check_len(&self, other: &Self) -> Result<()> {
        if self.len() == other.len() {
            Ok(())
        } else {
            Err(Error::dim(self.len(), other.len()))
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_len(other)?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> T {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn is_zero_direction(&self) -> bool {
        self.norm() < tau_zero()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, c: T) -> Self {
        ParamVec(self.0.iter().map(|&x| c * x).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(ParamVec(self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(ParamVec(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect()))
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: T, x: &Self) -> Result<()> {
        self.check_len(x)?;
        for (s, &xi) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * xi;
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|x| x.as_f64()).collect()
    }
}

impl<T> Deref for ParamVec<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for ParamVec<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T> From<Vec<T>> for ParamVec<T> {
    fn from(v: Vec<T>) -> Self {
        ParamVec(v)
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Split of a minibatch gradient into a full-gradient component and a
/// batch-specific noise residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T> {
    pub full_component: ParamVec<T>,
    pub noise_component: ParamVec<T>,
    pub cosine: T,
}

/// Cosine similarity, clamped to [-1, 1]; zero when either vector is below
/// [`TAU_ZERO`] in norm.
pub fn cosine_similarity<T: Scalar>(a: &ParamVec<T>, b: &ParamVec<T>) -> Result<T> {
    let ab = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < tau_zero() || nb < tau_zero() {
        return Ok(T::zero());
    }
    let c = ab / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Cosine-scaled decomposition: `full = cos(g_full, g_batch) * g_full`,
/// `noise = g_batch - full`. The full component is scaled by the raw
/// `g_full`, so the two parts are orthogonal only when both norms agree.
pub fn decompose_paper<T: Scalar>(
    g_full: &ParamVec<T>,
    g_batch: &ParamVec<T>,
) -> Result<Decomposition<T>> {
    g_full.check_len(g_batch)?;
    if g_full.is_zero_direction() {
        return Ok(Decomposition {
            full_component: ParamVec::zeros(g_batch.len()),
            noise_component: g_batch.clone(),
            cosine: T::zero(),
        });
    }
    let cosine = cosine_similarity(g_full, g_batch)?;
    let full_component = g_full.scaled(cosine);
    let noise_component = g_batch.sub(&full_component)?;
    Ok(Decomposition { full_component, noise_component, cosine })
}

/// Orthogonal projection of `g_batch` onto `g_full` and its exact residual.
pub fn decompose_orthogonal<T: Scalar>(
    g_full: &ParamVec<T>,
    g_batch: &ParamVec<T>,
) -> Result<Decomposition<T>> {
    g_full.check_len(g_batch)?;
    if g_full.is_zero_direction() {
        return Ok(Decomposition {
            full_component: ParamVec::zeros(g_batch.len()),
            noise_component: g_batch.clone(),
            cosine: T::zero(),
        });
    }
    let cosine = cosine_similarity(g_full, g_batch)?;
    let gg = g_full.dot(g_full)?;
    let coef = g_batch.dot(g_full)? / gg;
    // One refinement pass removes the rounding left in the first residual.
    let residual = g_batch.sub(&g_full.scaled(coef))?;
    let coef = coef + residual.dot(g_full)? / gg;
    let full_component = g_full.scaled(coef);
    let noise_component = g_batch.sub(&full_component)?;
    Ok(Decomposition { full_component, noise_component, cosine })
}

/// Exponential moving average of minibatch gradients, zero-initialized and
/// without bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState<T> {
    pub m: ParamVec<T>,
    lambda: T,
    pub steps_seen: u64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(dim: usize, lambda: T) -> Result<Self> {
        if !(lambda >= T::zero() && lambda <= T::one()) {
            return Err(Error::Domain(format!("EMA factor {lambda} outside [0, 1]")));
        }
        Ok(EmaState { m: ParamVec::zeros(dim), lambda, steps_seen: 0 })
    }

    /// Rebuilds a state from persisted parts.
    pub fn from_parts(m: ParamVec<T>, lambda: T, steps_seen: u64) -> Result<Self> {
        let mut s = Self::new(m.len(), lambda)?;
        s.m = m;
        s.steps_seen = steps_seen;
        Ok(s)
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }
}

/// `m <- lambda * m + (1 - lambda) * g`.
pub fn ema_update<T: Scalar>(state: &EmaState<T>, g: &ParamVec<T>) -> Result<EmaState<T>> {
    state.m.check_len(g)?;
    let lambda = state.lambda;
    let one_minus = T::one() - lambda;
    let m = state
        .m
        .iter()
        .zip(g.iter())
        .map(|(&mi, &gi)| lambda * mi + one_minus * gi)
        .collect::<Vec<_>>();
    Ok(EmaState { m: ParamVec(m), lambda, steps_seen: state.steps_seen + 1 })
}

/// `rho * d / ||d||`, or the zero vector when `rho == 0` or `d` is degenerate.
pub fn perturbation<T: Scalar>(d: &ParamVec<T>, rho: T) -> Result<ParamVec<T>> {
    if rho < T::zero() {
        return Err(Error::Domain(format!("negative perturbation radius {rho}")));
    }
    let n = d.norm();
    if rho == T::zero() || n < tau_zero() {
        return Ok(ParamVec::zeros(d.len()));
    }
    let scale = rho / n;
    Ok(d.scaled(scale))
}

/// EMA factor paired with a learning rate: `clamp(1 - c * gamma^(2/3), 0, 1)`.
pub fn lambda_from_gamma(gamma: f64, c: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {gamma}")));
    }
    if !(c > 0.0) {
        return Err(Error::Domain(format!("constant must be positive, got {c}")));
    }
    Ok((1.0 - c * gamma.powf(2.0 / 3.0)).clamp(0.0, 1.0))
}
