//! Dense vector kernels, cosine geometry, tempered softmax, entropy and the
//! seeded random-number contract shared by every other module.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine distance between dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateVector("zero-norm input to cosine distance"));
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Cosine distance between two vectors already known to have unit norm.
#[inline]
pub(crate) fn unit_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b).clamp(-1.0, 1.0)
}

pub fn l2_normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector("zero-norm input to l2_normalize"));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// `softmax(v / tau)`, stabilised by subtracting the maximum.
pub fn softmax_temp(v: &[f64], tau: f64) -> Vec<f64> {
    debug_assert!(tau > 0.0);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    softmax_temp(v, 1.0)
}

/// Shannon entropy in bits divided by `log2(classes)`, with `0 log 0 = 0`.
pub fn normalized_entropy(p: &[f64], classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::InvalidClassCount {
            count: classes,
            reason: "entropy normalisation needs at least two classes",
        });
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum();
    Ok((h / (classes as f64).log2()).clamp(0.0, 1.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the two largest entries, `(first, second)`, ties to the lowest index.
pub fn top_two(v: &[f64]) -> (usize, usize) {
    debug_assert!(v.len() >= 2);
    let first = argmax(v);
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, &x) in v.iter().enumerate() {
        if i != first && x > v[second] {
            second = i;
        }
    }
    (first, second)
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Named random streams. Each pipeline phase draws from its own stream so
/// that toggling one feature leaves the other phases' draws untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Clustering = 1,
    ComplementaryLabels = 2,
    NegativeKeys = 3,
    Selection = 4,
    DataGeneration = 5,
    Augmentation = 6,
    WeightInit = 7,
    BankSampling = 8,
    Shuffle = 9,
    ClassifierExtension = 10,
}

/// Seeded, portable generator (ChaCha8 with an explicit stream id).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream as u64)
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
