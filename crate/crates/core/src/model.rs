//! Differentiable loss evaluation for a small zoo of dense models.
//!
//! Parameters are laid out layer by layer: the weight matrix of each layer
//! (row-major, `out x in`) followed by its bias vector when biases are
//! enabled. Losses are per-example means; `mse` sums squared errors over the
//! output units of an example.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::ParamVec;
use crate::scalar::Scalar;

keyword_enum!(ModelKind {
    LinearRegression => "linear-regression",
    LogisticSoftmax => "logistic-softmax",
    Mlp => "mlp",
});

keyword_enum!(Activation {
    Tanh => "tanh",
    Relu => "relu",
});

keyword_enum!(LossKind {
    Mse => "mse",
    CrossEntropy => "cross-entropy",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub bias: bool,
}

impl ModelSpec {
    pub fn linear_regression(input: usize, output: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LinearRegression,
            layer_sizes: vec![input, output],
            activation: Activation::Tanh,
            loss: LossKind::Mse,
            bias: true,
        }
    }

    pub fn logistic(input: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LogisticSoftmax,
            layer_sizes: vec![input, classes],
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
            bias: true,
        }
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Self {
        ModelSpec { kind: ModelKind::Mlp, layer_sizes, activation, loss, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 {
            return Err(Error::Config("layer_sizes needs at least input and output".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticSoftmax if sizes.len() != 2 => {
                return Err(Error::Config(format!(
                    "{:?} takes exactly two layer sizes, got {}",
                    self.kind,
                    sizes.len()
                )))
            }
            ModelKind::LinearRegression if self.loss != LossKind::Mse => {
                return Err(Error::Config("linear-regression requires mse loss".into()))
            }
            ModelKind::LogisticSoftmax if self.loss != LossKind::CrossEntropy => {
                return Err(Error::Config("logistic-softmax requires cross-entropy loss".into()))
            }
            _ => {}
        }
        if self.loss == LossKind::CrossEntropy && self.output_dim() < 2 {
            return Err(Error::Config("cross-entropy needs at least 2 output units".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + if self.bias { o } else { 0 }).sum()
    }

    fn hidden_activation(&self) -> Option<Activation> {
        match self.kind {
            ModelKind::Mlp => Some(self.activation),
            _ => None,
        }
    }
}

/// Supervision for a set of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets<T> {
    /// Integer class ids.
    Classes(Vec<usize>),
    /// Row-major `n x width` real targets.
    Real { values: Vec<T>, width: usize },
}

impl<T: Scalar> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Real { values, width } => values.len() / (*width).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Self {
        match self {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Real { values, width } => Targets::Real {
                values: indices
                    .iter()
                    .flat_map(|&i| values[i * width..(i + 1) * width].iter().copied())
                    .collect(),
                width: *width,
            },
        }
    }
}

/// A set of examples: row-major features plus targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch<T> {
    pub features: Vec<T>,
    pub dim: usize,
    pub targets: Targets<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(features: Vec<T>, dim: usize, targets: Targets<T>) -> Result<Self> {
        if dim == 0 || features.len() % dim != 0 {
            return Err(Error::Consistency(format!(
                "feature buffer of length {} is not a multiple of width {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        if let Targets::Real { values, width } = &targets {
            if *width == 0 || values.len() != n * width {
                return Err(Error::Consistency("real targets do not match example count".into()));
            }
        }
        if targets.len() != n {
            return Err(Error::Consistency(format!(
                "{n} feature rows but {} targets",
                targets.len()
            )));
        }
        Ok(Batch { features, dim, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given rows (in the given order) into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let features = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Batch { features, dim: self.dim, targets: self.targets.select(indices) }
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.dim != spec.input_dim() {
            return Err(Error::dim(spec.input_dim(), self.dim));
        }
        match (&self.targets, spec.loss) {
            (Targets::Classes(c), LossKind::CrossEntropy) => {
                if let Some(&bad) = c.iter().find(|&&y| y >= spec.output_dim()) {
                    return Err(Error::Consistency(format!(
                        "class id {bad} outside model output width {}",
                        spec.output_dim()
                    )));
                }
            }
            (Targets::Real { width, .. }, LossKind::Mse) => {
                if *width != spec.output_dim() {
                    return Err(Error::dim(spec.output_dim(), *width));
                }
            }
            _ => {
                return Err(Error::Consistency(
                    "target kind does not match loss (classes need cross-entropy, reals need mse)"
                        .into(),
                ))
            }
        }
        Ok(())
    }
}

fn check_params<T: Scalar>(spec: &ModelSpec, params: &ParamVec<T>) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::dim(spec.param_count(), params.len()));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamVec<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            out.push(T::of(rng.random_range(-limit..=limit)));
        }
        if spec.bias {
            out.extend(std::iter::repeat_n(T::zero(), fan_out));
        }
    }
    Ok(ParamVec::from_vec(out))
}

struct LayerView {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: Option<usize>,
}

fn layer_views(spec: &ModelSpec) -> Vec<LayerView> {
    let mut off = 0;
    spec.layers()
        .map(|(fan_in, fan_out)| {
            let w_off = off;
            off += fan_in * fan_out;
            let b_off = spec.bias.then(|| {
                let b = off;
                off += fan_out;
                b
            });
            LayerView { fan_in, fan_out, w_off, b_off }
        })
        .collect()
}

fn activate<T: Scalar>(act: Activation, z: T) -> T {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(T::zero()),
    }
}

/// Derivative expressed through the activation output `a` and input `z`.
fn activate_grad<T: Scalar>(act: Activation, z: T, a: T) -> T {
    match act {
        Activation::Tanh => T::one() - a * a,
        Activation::Relu => {
            if z > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// Forward pass storing pre-activations and activations of every layer.
fn forward<T: Scalar>(
    spec: &ModelSpec,
    views: &[LayerView],
    params: &[T],
    x: &[T],
    zs: &mut Vec<Vec<T>>,
    acts: &mut Vec<Vec<T>>,
) {
    let hidden = spec.hidden_activation();
    acts.clear();
    zs.clear();
    acts.push(x.to_vec());
    for (l, v) in views.iter().enumerate() {
        let input = &acts[l];
        let mut z = vec![T::zero(); v.fan_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &params[v.w_off + o * v.fan_in..v.w_off + (o + 1) * v.fan_in];
            let mut s = v.b_off.map_or(T::zero(), |b| params[b + o]);
            for (&w, &a) in row.iter().zip(input) {
                s += w * a;
            }
            *zo = s;
        }
        let last = l + 1 == views.len();
        let a = match (last, hidden) {
            (false, Some(act)) => z.iter().map(|&zi| activate(act, zi)).collect(),
            _ => z.clone(),
        };
        zs.push(z);
        acts.push(a);
    }
}

/// Per-example loss and its gradient with respect to the network output.
fn output_loss<T: Scalar>(
    spec: &ModelSpec,
    out: &[T],
    targets: &Targets<T>,
    i: usize,
    dout: Option<&mut Vec<T>>,
) -> T {
    match (spec.loss, targets) {
        (LossKind::CrossEntropy, Targets::Classes(c)) => {
            let y = c[i];
            let max = out.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = out.iter().map(|&o| (o - max).exp()).sum();
            let lse = max + sum.ln();
            if let Some(d) = dout {
                d.clear();
                d.extend(out.iter().map(|&o| (o - lse).exp()));
                d[y] -= T::one();
            }
            lse - out[y]
        }
        (LossKind::Mse, Targets::Real { values, width }) => {
            let y = &values[i * width..(i + 1) * width];
            let mut l = T::zero();
            for (&o, &t) in out.iter().zip(y) {
                l += (o - t) * (o - t);
            }
            if let Some(d) = dout {
                d.clear();
                let two = T::of(2.0);
                d.extend(out.iter().zip(y).map(|(&o, &t)| two * (o - t)));
            }
            l
        }
        _ => unreachable!("target kind checked against loss"),
    }
}

/// Network outputs (logits or regression predictions) for every example.
pub fn predict<T: Scalar>(spec: &ModelSpec, params: &ParamVec<T>, batch: &Batch<T>) -> Result<Vec<Vec<T>>> {
    check_params(spec, params)?;
    if batch.dim != spec.input_dim() {
        return Err(Error::dim(spec.input_dim(), batch.dim));
    }
    let views = layer_views(spec);
    let (mut zs, mut acts) = (Vec::new(), Vec::new());
    Ok((0..batch.len())
        .map(|i| {
            forward(spec, &views, params, batch.row(i), &mut zs, &mut acts);
            acts.pop().unwrap()
        })
        .collect())
}

/// Mean per-example loss.
pub fn loss<T: Scalar>(spec: &ModelSpec, params: &ParamVec<T>, batch: &Batch<T>) -> Result<T> {
    check_params(spec, params)?;
    batch.check(spec)?;
    let views = layer_views(spec);
    let (mut zs, mut acts) = (Vec::new(), Vec::new());
    let mut total = T::zero();
    for i in 0..batch.len() {
        forward(spec, &views, params, batch.row(i), &mut zs, &mut acts);
        total += output_loss(spec, acts.last().unwrap(), &batch.targets, i, None);
    }
    Ok(total / T::of_usize(batch.len()))
}

/// Mean loss and its analytic gradient.
pub fn grad<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
) -> Result<(T, ParamVec<T>)> {
    check_params(spec, params)?;
    batch.check(spec)?;
    let views = layer_views(spec);
    let hidden = spec.hidden_activation();
    let mut g = vec![T::zero(); params.len()];
    let (mut zs, mut acts) = (Vec::new(), Vec::new());
    let mut delta = Vec::new();
    let mut total = T::zero();
    for i in 0..batch.len() {
        forward(spec, &views, params, batch.row(i), &mut zs, &mut acts);
        total += output_loss(spec, acts.last().unwrap(), &batch.targets, i, Some(&mut delta));
        for l in (0..views.len()).rev() {
            let v = &views[l];
            let input = &acts[l];
            for (o, &d) in delta.iter().enumerate() {
                let row = &mut g[v.w_off + o * v.fan_in..v.w_off + (o + 1) * v.fan_in];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
                if let Some(b) = v.b_off {
                    g[b + o] += d;
                }
            }
            if l == 0 {
                break;
            }
            let act = hidden.expect("multi-layer models are mlps");
            let mut prev = vec![T::zero(); v.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                let row = &params[v.w_off + o * v.fan_in..v.w_off + (o + 1) * v.fan_in];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (j, p) in prev.iter_mut().enumerate() {
                *p *= activate_grad(act, zs[l - 1][j], acts[l][j]);
            }
            delta = prev;
        }
    }
    let n = T::of_usize(batch.len());
    for gi in g.iter_mut() {
        *gi /= n;
    }
    Ok((total / n, ParamVec::from_vec(g)))
}

/// Gradient of the mean loss over the whole example set.
pub fn full_grad<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    examples: &Batch<T>,
) -> Result<ParamVec<T>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(grad(spec, params, examples)?.1)
}

/// Default central-difference step for [`hvp`].
pub fn default_hvp_step<T: Scalar>(params: &ParamVec<T>) -> T {
    T::of(1e-3) * (T::one() + params.norm())
}

/// Hessian-vector product by central differences of the gradient along the
/// unit direction of `v`, rescaled by `||v||`.
pub fn hvp<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVec<T>,
    batch: &Batch<T>,
    v: &ParamVec<T>,
    h: T,
) -> Result<ParamVec<T>> {
    params.check_len(v)?;
    let vn = v.norm();
    if vn < crate::numkit::tau_zero() {
        return Err(Error::Domain("hvp direction has zero norm".into()));
    }
    if !(h > T::zero()) {
        return Err(Error::Domain(format!("hvp step must be positive, got {h}")));
    }
    let unit = v.scaled(T::one() / vn);
    let mut plus = params.clone();
    plus.axpy(h, &unit)?;
    let mut minus = params.clone();
    minus.axpy(-h, &unit)?;
    let (_, gp) = grad(spec, &plus, batch)?;
    let (_, gm) = grad(spec, &minus, batch)?;
    let scale = vn / (T::of(2.0) * h);
    Ok(ParamVec::from_vec(gp.iter().zip(gm.iter()).map(|(&a, &b)| (a - b) * scale).collect()))
}

/// Bias-free linear regression whose loss is the quadratic
/// `sum_i eig_i * w_i^2 / 2` with zero targets, so its Hessian is
/// `diag(eigenvalues)`. Eigenvalues must be non-negative.
pub fn quadratic_problem<T: Scalar>(eigenvalues: &[f64]) -> Result<(ModelSpec, Batch<T>)> {
    let d = eigenvalues.len();
    if d == 0 || eigenvalues.iter().any(|&e| !(e >= 0.0)) {
        return Err(Error::Config("quadratic eigenvalues must be non-negative and non-empty".into()));
    }
    // Loss is mean over d rows of (x_i . w)^2, so H = (2 / d) X^T X.
    let mut features = vec![T::zero(); d * d];
    for (i, &e) in eigenvalues.iter().enumerate() {
        features[i * d + i] = T::of((e * d as f64 / 2.0).sqrt());
    }
    let batch = Batch::new(features, d, Targets::Real { values: vec![T::zero(); d], width: 1 })?;
    Ok((ModelSpec::linear_regression(d, 1).without_bias(), batch))
}
