//! Elementary numerics shared by every module: vector algebra, softmax,
//! KL divergence, smooth-L1 and seeded Gaussian sampling.
//!
//! Everything here is a pure function of its inputs. Randomness is never
//! ambient: callers pass an explicit [`RngState`] that they own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Dense feature vector in one of the feature spaces (input, cls or loc).
pub type FeatureVector = Vec<f64>;

/// Norms below this are treated as degenerate (zero) vectors.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("zero-norm vector (norm {norm:e}); degenerate feature")]
    ZeroNormVector { norm: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("support mismatch at index {index}: q > 0 but p <= 0")]
    SupportMismatch { index: usize },
    #[error("negative variance {value} at dimension {index}")]
    NegativeVariance { index: usize, value: f64 },
}

/// Deterministic, splittable random state.
///
/// The same seed always yields the same sample stream. `derive` produces an
/// independent stream for a sub-task (batch selection, feature sampling, ...)
/// so that adding a consumer never perturbs the others.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Seed this state was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `label`. Distinct labels give streams
    /// that are decorrelated from each other and from the parent.
    pub fn derive(&self, label: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity `a.b / (|a||b|)` in `[-1, 1]`.
///
/// A near-zero norm is an error rather than a silent 0: it signals a
/// degenerate feature the caller must not average away.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM_EPS {
        return Err(NumericsError::ZeroNormVector { norm: na });
    }
    if nb < ZERO_NORM_EPS {
        return Err(NumericsError::ZeroNormVector { norm: nb });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if scores.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `KL(q || p) = sum_c q_c (ln q_c - ln p_c)` with the `0 ln 0 = 0` convention.
///
/// The convention is load-bearing: soft-label distributions always carry an
/// exact 0 on the background entry.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64, NumericsError> {
    if q.len() != p.len() {
        return Err(NumericsError::DimensionMismatch {
            left: q.len(),
            right: p.len(),
        });
    }
    debug_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9, "q must sum to 1");
    let mut total = 0.0;
    for (i, (&qc, &pc)) in q.iter().zip(p).enumerate() {
        if qc == 0.0 {
            continue;
        }
        if pc <= 0.0 {
            return Err(NumericsError::SupportMismatch { index: i });
        }
        total += qc * (qc.ln() - pc.ln());
    }
    Ok(total)
}

/// Smooth-L1: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`]: `x` for `|x| < 1`, else `sign(x)`.
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Cross-entropy of a hard label against `softmax(logits)`, returned with
/// its gradient `softmax(logits) - onehot(label)` w.r.t. the logits.
pub fn cross_entropy_from_logits(
    logits: &[f64],
    label: usize,
) -> Result<(f64, Vec<f64>), NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    if label >= logits.len() {
        return Err(NumericsError::DimensionMismatch {
            left: label,
            right: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let value = log_sum - (logits[label] - max);
    let mut gradient = softmax(logits)?;
    gradient[label] -= 1.0;
    Ok((value, gradient))
}

/// One draw per dimension from `N(mean_d, var_d)`.
///
/// Always consumes exactly `mean.len()` normal draws so the stream position
/// does not depend on the variance values; `var = 0` returns `mean` exactly.
pub fn gaussian_sample(
    mean: &[f64],
    var: &[f64],
    rng: &mut RngState,
) -> Result<FeatureVector, NumericsError> {
    if mean.len() != var.len() {
        return Err(NumericsError::DimensionMismatch {
            left: mean.len(),
            right: var.len(),
        });
    }
    if let Some((i, &v)) = var.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(NumericsError::NegativeVariance { index: i, value: v });
    }
    Ok(mean
        .iter()
        .zip(var)
        .map(|(&m, &v)| m + v.sqrt() * rng.normal())
        .collect())
}
