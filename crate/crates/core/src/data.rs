//! Datasets: synthetic generators, IDX ingestion, label noise, and
//! minibatch samplers.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Targets};
use crate::scalar::Scalar;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An immutable example set. `class_count` is 0 for regression data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    pub examples: Batch<T>,
    pub class_count: usize,
    /// Generating weights for synthetic regression data.
    pub true_weights: Option<Vec<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(examples: Batch<T>, class_count: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Targets::Classes(c) = &examples.targets {
            if class_count == 0 {
                return Err(Error::Consistency("class labels need class_count >= 1".into()));
            }
            if let Some(&bad) = c.iter().find(|&&y| y >= class_count) {
                return Err(Error::Consistency(format!(
                    "label {bad} outside [0, {class_count})"
                )));
            }
        }
        Ok(Dataset { examples, class_count, true_weights: None })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.dim
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.examples.targets {
            Targets::Classes(c) => Some(c),
            Targets::Real { .. } => None,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<T> {
        self.examples.select(indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            examples: self.examples.select(indices),
            class_count: self.class_count,
            true_weights: self.true_weights.clone(),
        }
    }

    /// Seeded shuffle followed by a prefix split; `test_fraction` of the
    /// examples (rounded down) go to the second set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Option<Self>)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("split ratio {test_fraction} outside [0, 1)")));
        }
        let n = self.len();
        let n_test = (n as f64 * test_fraction).floor() as usize;
        if n_test == 0 {
            return Ok((self.clone(), None));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (test, train) = order.split_at(n_test);
        Ok((self.subset(train), Some(self.subset(test))))
    }
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

/// Balanced Gaussian blobs with unit isotropic noise. Class means are random
/// directions scaled to radius `spread`.
pub fn gen_gaussian_mixture<T: Scalar>(
    n: usize,
    dim: usize,
    classes: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n == 0 || dim == 0 {
        return Err(Error::Config("gaussian mixture needs n >= 1 and dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| spread * x / norm).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    for &y in &labels {
        for mu in &means[y] {
            features.push(T::of(*mu) + normal::<T>(&mut rng));
        }
    }
    Dataset::new(Batch::new(features, dim, Targets::Classes(labels))?, classes)
}

/// Two interleaved half circles: class 0 on the unit circle centred at the
/// origin (upper half), class 1 on the unit circle centred at (1, 0.5)
/// (lower half). Gaussian noise of standard deviation `noise` is added.
pub fn gen_two_moons<T: Scalar>(n: usize, noise: f64, seed: u64) -> Result<Dataset<T>> {
    if n < 2 {
        return Err(Error::Config(format!("two moons needs n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let mut push = |x: f64, y: f64, label: usize, rng: &mut ChaCha8Rng| {
        let (ex, ey): (f64, f64) = if noise > 0.0 {
            (StandardNormal.sample(rng), StandardNormal.sample(rng))
        } else {
            (0.0, 0.0)
        };
        features.push(T::of(x + noise * ex));
        features.push(T::of(y + noise * ey));
        labels.push(label);
    };
    for _ in 0..n_outer {
        let t: f64 = rng.random_range(0.0..=std::f64::consts::PI);
        push(t.cos(), t.sin(), 0, &mut rng);
    }
    for _ in 0..n_inner {
        let t: f64 = rng.random_range(0.0..=std::f64::consts::PI);
        push(1.0 - t.cos(), 0.5 - t.sin(), 1, &mut rng);
    }
    Dataset::new(Batch::new(features, 2, Targets::Classes(labels))?, 2)
}

/// `y = X w* + noise * e` with standard normal `X`, `w*`, and `e`.
pub fn gen_linear_regression<T: Scalar>(
    n: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if n < 2 {
        return Err(Error::Config(format!("linear regression needs n >= 2, got {n}")));
    }
    if dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e: f64 = StandardNormal.sample(&mut rng);
        let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise * e;
        features.extend(x.into_iter().map(T::of));
        targets.push(T::of(y));
    }
    let mut ds =
        Dataset::new(Batch::new(features, dim, Targets::Real { values: targets, width: 1 })?, 0)?;
    ds.true_weights = Some(w.into_iter().map(T::of).collect());
    Ok(ds)
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(what))
}

fn truncated(what: &str) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("{what} file is truncated"),
    ))
}

/// Parses an IDX image file (magic 0x00000803) and label file (magic
/// 0x00000801). Pixels are scaled by 1/255.
pub fn parse_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let magic = read_be_u32(images, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("image file magic {magic:#010x}, expected 0x00000803")));
    }
    let magic = read_be_u32(labels, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("label file magic {magic:#010x}, expected 0x00000801")));
    }
    let count = read_be_u32(images, 4, "image")? as usize;
    let rows = read_be_u32(images, 8, "image")? as usize;
    let cols = read_be_u32(images, 12, "image")? as usize;
    let label_count = read_be_u32(labels, 4, "label")? as usize;
    if count != label_count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if count == 0 || rows * cols == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim = rows * cols;
    let pixels = images.get(16..16 + count * dim).ok_or_else(|| truncated("image"))?;
    let raw_labels = labels.get(8..8 + count).ok_or_else(|| truncated("label"))?;
    let scale = T::one() / T::of(255.0);
    let features = pixels.iter().map(|&p| T::of(p as f64) * scale).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(Batch::new(features, dim, Targets::Classes(labels))?, class_count.max(2))
}

pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Serializes a dataset of byte pixels and labels as an IDX pair.
pub fn encode_idx(count: usize, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(count as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Symmetric label noise: each label is, with probability `rate`, replaced
/// by a uniform draw over the other classes.
pub fn inject_label_noise<T: Scalar>(dataset: &Dataset<T>, rate: f64, seed: u64) -> Result<Dataset<T>> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Domain("label noise needs a classification dataset".into()))?;
    if dataset.class_count < 2 {
        return Err(Error::Domain("label noise needs at least 2 classes".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain(format!("noise rate {rate} outside [0, 1]")));
    }
    let k = dataset.class_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<usize> = labels
        .iter()
        .map(|&y| {
            if rng.random_bool(rate) {
                let other = rng.random_range(0..k - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            } else {
                y
            }
        })
        .collect();
    let mut out = dataset.clone();
    out.examples.targets = Targets::Classes(noisy);
    Ok(out)
}

keyword_enum!(SamplerMode {
    WithReplacement => "with-replacement",
    EpochShuffle => "epoch-shuffle",
});

/// Seeded stream of minibatch indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    rng: ChaCha8Rng,
    mode: SamplerMode,
    permutation: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

/// Plain-data snapshot of a [`Sampler`] for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSnapshot {
    pub rng: RngSnapshot,
    pub mode: SamplerMode,
    pub permutation: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

impl Sampler {
    pub fn new(seed: u64, mode: SamplerMode) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mode,
            permutation: Vec::new(),
            cursor: 0,
            epoch: 0,
        }
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn snapshot(&self) -> SamplerSnapshot {
        SamplerSnapshot {
            rng: RngSnapshot::capture(&self.rng),
            mode: self.mode,
            permutation: self.permutation.clone(),
            cursor: self.cursor,
            epoch: self.epoch,
        }
    }

    pub fn from_snapshot(s: &SamplerSnapshot) -> Self {
        Sampler {
            rng: s.rng.restore(),
            mode: s.mode,
            permutation: s.permutation.clone(),
            cursor: s.cursor,
            epoch: s.epoch,
        }
    }

    /// Draws `b` example indices out of `n`. In epoch-shuffle mode a batch
    /// never straddles two epochs: a short remainder is dropped and the next
    /// epoch begins.
    pub fn sample_batch(&mut self, n: usize, b: usize) -> Result<Vec<usize>> {
        if b == 0 || n == 0 {
            return Err(Error::Config("batch size and dataset size must be positive".into()));
        }
        match self.mode {
            SamplerMode::WithReplacement => Ok((0..b).map(|_| self.rng.random_range(0..n)).collect()),
            SamplerMode::EpochShuffle => {
                if b > n {
                    return Err(Error::Config(format!("batch size {b} exceeds dataset size {n}")));
                }
                if self.permutation.len() != n || self.cursor + b > n {
                    if !self.permutation.is_empty() {
                        self.epoch += 1;
                    }
                    self.permutation = (0..n).collect();
                    self.permutation.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let out = self.permutation[self.cursor..self.cursor + b].to_vec();
                self.cursor += b;
                Ok(out)
            }
        }
    }

    /// Nested draw: `outer` is a without-replacement subset of size `k * b`,
    /// `inner` a uniform size-`b` subset of `outer`.
    pub fn sample_nested(&mut self, n: usize, b: usize, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if k == 0 || b == 0 {
            return Err(Error::Config("nested sampling needs k >= 1 and b >= 1".into()));
        }
        if k * b > n {
            return Err(Error::Config(format!("outer batch {} exceeds dataset size {n}", k * b)));
        }
        let outer: Vec<usize> = index::sample(&mut self.rng, n, k * b).into_vec();
        let inner = if k == 1 {
            outer.clone()
        } else {
            index::sample(&mut self.rng, k * b, b).into_iter().map(|j| outer[j]).collect()
        };
        Ok((outer, inner))
    }
}

/// Grows `inner` into a superset of `k * inner.len()` distinct indices by
/// adding uniformly chosen examples not already present. `inner` leads the
/// result so that `k == 1` returns it unchanged.
pub fn extend_to_superset(
    inner: &[usize],
    n: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("strength k must be >= 1".into()));
    }
    let target = k * inner.len();
    if target > n {
        return Err(Error::Config(format!("outer batch {target} exceeds dataset size {n}")));
    }
    let mut taken = vec![false; n];
    for &i in inner {
        if std::mem::replace(&mut taken[i], true) {
            return Err(Error::Consistency("inner batch repeats an index".into()));
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    let extra = target - inner.len();
    let (chosen, _) = rest.partial_shuffle(rng, extra);
    let mut out = inner.to_vec();
    out.extend_from_slice(chosen);
    Ok(out)
}

/// Every size-`b` subset of `0..n` in lexicographic order.
pub fn all_minibatches(n: usize, b: usize) -> impl Iterator<Item = Vec<usize>> {
    use itertools::Itertools;
    (0..n).combinations(b)
}
