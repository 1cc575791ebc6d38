//! Probability-vector kernel: softmax, entropies, divergences, agreement,
//! and the seeded generator every experiment draws from.
//!
//! All divergences are in nats. Logs inside KL/JS use a floor of
//! [`PROB_FLOOR`]; inputs are clamped but never renormalized.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{invalid, Result};

/// Floor applied to probabilities before taking logs in KL/JS.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` for a valid posterior.
pub const SUM_TOL: f64 = 1e-9;

/// A probability vector over `C >= 1` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior(Vec<f64>);

impl Posterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("posterior must have at least one class"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("posterior entries must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(invalid(format!("posterior sums to {sum}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, hot: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[hot] = 1.0;
        Self(v)
    }

    /// Wraps a vector already known to be a distribution (e.g. softmax output).
    pub(crate) fn from_trusted(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for Posterior {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(invalid(format!("need at least 2 logits, got {}", logits.len())));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(invalid("non-finite logit"));
    }
    Ok(())
}

pub(crate) fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax without validation; caller guarantees finite logits.
pub(crate) fn softmax_raw(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

pub(crate) fn log_softmax_raw(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Result<Posterior> {
    check_logits(logits)?;
    Ok(Posterior(softmax_raw(logits)))
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub(crate) fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Evaluated as `1 - KL(p || uniform) / log C`, which is exactly 1 for a
/// softmax of equal logits.
pub(crate) fn normalized_entropy_raw(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let c = p.len() as f64;
    let kl_to_uniform: f64 = p.iter().filter(|v| **v > 0.0).map(|v| v * (v * c).ln()).sum();
    (1.0 - kl_to_uniform / c.ln()).clamp(0.0, 1.0)
}

/// Entropy divided by `log C`, in `[0, 1]`.
pub fn normalized_entropy(p: &Posterior) -> f64 {
    normalized_entropy_raw(&p.0)
}

fn same_dim(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

pub fn kl_divergence(p: &Posterior, q: &Posterior) -> Result<f64> {
    same_dim(&p.0, &q.0)?;
    Ok(kl_raw(&p.0, &q.0))
}

pub(crate) fn js_raw(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl_raw(p, &m) + 0.5 * kl_raw(q, &m)).clamp(0.0, std::f64::consts::LN_2)
}

pub fn js_divergence(p: &Posterior, q: &Posterior) -> Result<f64> {
    same_dim(&p.0, &q.0)?;
    Ok(js_raw(&p.0, &q.0))
}

pub(crate) fn cosine_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        return Err(invalid("cosine similarity of a zero vector"));
    }
    Ok((dot / (np * nq)).clamp(0.0, 1.0))
}

/// Cosine similarity, clamped to `[0, 1]` (non-negative for probability vectors).
pub fn cosine_similarity(p: &Posterior, q: &Posterior) -> Result<f64> {
    same_dim(&p.0, &q.0)?;
    cosine_raw(&p.0, &q.0)
}

/// Deterministic generator: xoshiro256++ seeded through SplitMix64.
///
/// Normal draws use the ziggurat sampler from `rand_distr`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "xoshiro256++/splitmix64";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `label`; does not advance `self`.
    pub fn derive(&self, label: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(0x9e37_79b9))))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian_draw(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0)
            .expect("gamma shape must be positive")
            .sample(&mut self.inner)
    }

    /// Dirichlet(alpha * 1) over `k` categories. Redraws if every gamma underflows.
    pub fn dirichlet_symmetric(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        loop {
            let g: Vec<f64> = (0..k).map(|_| self.gamma(alpha)).collect();
            let s: f64 = g.iter().sum();
            if s > 0.0 && s.is_finite() {
                return g.into_iter().map(|v| v / s).collect();
            }
        }
    }

    /// Draws an index with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
