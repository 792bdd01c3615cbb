//! Categorical distributions, noise schedules and seeded random streams.
//!
//! Time runs from `t = 0` (pure noise) to `t = 1` (clean data). A schedule maps
//! `t` to the keep-probability `alpha(t)`, with `alpha(0) = 0` and `alpha(1) = 1`.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability vector.
pub const SUM_TOL: f64 = 1e-12;

/// Mass drift beyond this is a bug rather than rounding.
const SUM_REJECT_TOL: f64 = 1e-6;

/// Probability vector over `K >= 1` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates and, when the total drifts past [`SUM_TOL`], renormalizes.
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("categorical distribution needs K >= 1".into()));
        }
        for p in probs.iter_mut() {
            if !p.is_finite() || *p < -SUM_TOL {
                return Err(Error::Domain(format!("invalid probability entry {p}")));
            }
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_REJECT_TOL {
            return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
        }
        if (total - 1.0).abs() > SUM_TOL {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        for p in probs.iter_mut() {
            *p = p.min(1.0);
        }
        Ok(Self { probs })
    }

    /// Builds a distribution from non-negative weights by normalizing them.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(Error::Domain(format!("weights must have positive finite mass, got {total}")));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn delta(label: usize, k: usize) -> Result<Self> {
        if label >= k {
            return Err(Error::Domain(format!("label {label} outside vocabulary of size {k}")));
        }
        let mut probs = vec![0.0; k];
        probs[label] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("categorical distribution needs K >= 1".into()));
        }
        Ok(Self { probs: vec![1.0 / k as f64; k] })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, label: usize) -> f64 {
        self.probs.get(label).copied().unwrap_or(0.0)
    }

    /// Same distribution over a larger vocabulary, zero mass on the new labels.
    pub fn extended(&self, k: usize) -> Result<Self> {
        if k < self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: k });
        }
        let mut probs = self.probs.clone();
        probs.resize(k, 0.0);
        Ok(Self { probs })
    }

    /// Total-variation distance `0.5 * sum |p - q|`.
    pub fn tv(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: other.len() });
        }
        Ok(0.5 * self.probs.iter().zip(&other.probs).map(|(p, q)| (p - q).abs()).sum::<f64>())
    }

    /// Inverse-CDF sampling from a single uniform draw.
    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = k;
                cum += p;
                if u < cum {
                    return k;
                }
            }
        }
        last_positive
    }
}

impl TryFrom<Vec<f64>> for CategoricalDist {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<CategoricalDist> for Vec<f64> {
    fn from(d: CategoricalDist) -> Self {
        d.probs
    }
}

/// Entrywise `alpha * data + (1 - alpha) * noise`.
pub fn mix(data: &CategoricalDist, noise: &CategoricalDist, alpha: f64) -> Result<CategoricalDist> {
    if data.len() != noise.len() {
        return Err(Error::DimensionMismatch { expected: data.len(), got: noise.len() });
    }
    check_unit(alpha, "alpha")?;
    CategoricalDist::new(
        data.probs
            .iter()
            .zip(&noise.probs)
            .map(|(d, n)| alpha * d + (1.0 - alpha) * n)
            .collect(),
    )
}

pub fn sample_categorical(dist: &CategoricalDist, rng: &mut RngStream) -> usize {
    dist.sample(rng)
}

pub(crate) fn check_unit(x: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("{what} = {x} outside [0, 1]")));
    }
    Ok(())
}

/// `cos^2((1 - t) * pi / 2)`.
pub fn cosine_alpha(t: f64) -> Result<f64> {
    check_unit(t, "t")?;
    if t == 1.0 {
        return Ok(1.0);
    }
    let c = ((1.0 - t) * FRAC_PI_2).cos();
    Ok((c * c).clamp(0.0, 1.0))
}

/// Time derivative of [`cosine_alpha`]: `(pi / 2) * sin((1 - t) * pi)`.
pub fn cosine_alpha_dot(t: f64) -> Result<f64> {
    check_unit(t, "t")?;
    Ok((FRAC_PI_2 * ((1.0 - t) * std::f64::consts::PI).sin()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    LinearAlpha,
}

/// The map `t -> alpha(t)` and its derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
}

impl Schedule {
    pub const COSINE: Schedule = Schedule { kind: ScheduleKind::Cosine };
    pub const LINEAR: Schedule = Schedule { kind: ScheduleKind::LinearAlpha };

    pub fn new(kind: ScheduleKind) -> Self {
        Self { kind }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::Cosine => cosine_alpha(t),
            ScheduleKind::LinearAlpha => {
                check_unit(t, "t")?;
                Ok(t)
            }
        }
    }

    pub fn alpha_dot(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::Cosine => cosine_alpha_dot(t),
            ScheduleKind::LinearAlpha => {
                check_unit(t, "t")?;
                Ok(1.0)
            }
        }
    }
}

/// Deterministic random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8 with the stream id placed in the cipher's stream word, so
/// draws are bit-identical across runs and platforms. [`RngStream::fork`] derives
/// independent child streams from an integer key.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream whose id is a hash of this stream's id and `key`.
    pub fn fork(&self, key: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream ^ splitmix64(key.wrapping_add(0x5bd1_e995))))
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller; keeps the draw count fixed at two uniforms.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
