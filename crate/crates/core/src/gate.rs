//! Per-batch reliability signals derived from source and expert posteriors.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{cosine_raw, js_raw, normalized_entropy_raw, Posterior};

/// How a batch of source posteriors is reduced to one entropy scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyReduction {
    /// Mean of per-sample normalized entropies.
    #[default]
    MeanOfEntropies,
    /// Normalized entropy of the batch-mean posterior.
    EntropyOfMean,
}

/// How `r_src` is derived from `h_src`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum GateMode {
    /// `max(0, 1 - h_src)`.
    #[default]
    Reliability,
    /// Gate pinned to a constant, e.g. `1.0` for an ungated baseline.
    Forced(f64),
    /// `1 - max(0, 1 - h_src)`: a deliberately wrong gate used to check that
    /// the verification suite catches a broken gate.
    Inverted,
}

impl GateMode {
    pub fn apply(self, h_src: f64) -> f64 {
        let r = (1.0 - h_src).max(0.0);
        match self {
            GateMode::Reliability => r,
            GateMode::Forced(v) => v,
            GateMode::Inverted => 1.0 - r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilitySignals {
    /// Batch-level normalized source entropy.
    pub h_src: f64,
    pub r_src: f64,
    /// Batch-mean normalized expert entropy.
    pub h_exp: f64,
    pub cos_per_sample: Vec<f64>,
    /// Batch-mean source/expert Jensen-Shannon divergence, nats.
    pub d_js: f64,
    pub w_cos_per_sample: Vec<f64>,
}

fn check_batch(p_src: &[Posterior], p_exp: &[Posterior]) -> Result<usize> {
    if p_src.is_empty() {
        return Err(invalid("empty batch"));
    }
    if p_src.len() != p_exp.len() {
        return Err(invalid("source and expert batch sizes differ"));
    }
    let c = p_src[0].classes();
    if p_src.iter().chain(p_exp).any(|p| p.classes() != c) {
        return Err(invalid("class count differs across posteriors"));
    }
    Ok(c)
}

pub fn compute_signals(p_src: &[Posterior], p_exp: &[Posterior], w_min: f64) -> Result<ReliabilitySignals> {
    compute_signals_with(p_src, p_exp, w_min, EntropyReduction::MeanOfEntropies, GateMode::Reliability)
}

pub fn compute_signals_with(
    p_src: &[Posterior],
    p_exp: &[Posterior],
    w_min: f64,
    reduction: EntropyReduction,
    mode: GateMode,
) -> Result<ReliabilitySignals> {
    let c = check_batch(p_src, p_exp)?;
    if !(0.0..=1.0).contains(&w_min) {
        return Err(invalid(format!("w_min = {w_min} outside [0, 1]")));
    }
    let n = p_src.len() as f64;
    let h_src = match reduction {
        EntropyReduction::MeanOfEntropies => {
            p_src.iter().map(|p| normalized_entropy_raw(p.probs())).sum::<f64>() / n
        }
        EntropyReduction::EntropyOfMean => {
            let mut mean = vec![0.0; c];
            for p in p_src {
                for (m, v) in mean.iter_mut().zip(p.probs()) {
                    *m += v / n;
                }
            }
            normalized_entropy_raw(&mean)
        }
    };
    let r_src = mode.apply(h_src);
    let h_exp = p_exp.iter().map(|p| normalized_entropy_raw(p.probs())).sum::<f64>() / n;
    let d_js = p_src
        .iter()
        .zip(p_exp)
        .map(|(s, e)| js_raw(s.probs(), e.probs()))
        .sum::<f64>()
        / n;
    let cos_per_sample = p_src
        .iter()
        .zip(p_exp)
        .map(|(s, e)| cosine_raw(s.probs(), e.probs()))
        .collect::<Result<Vec<_>>>()?;
    let w_cos_per_sample = cos_per_sample
        .iter()
        .map(|cos| {
            let w_raw = w_min + (1.0 - w_min) * cos.max(0.0);
            r_src * w_raw + (1.0 - r_src)
        })
        .collect();
    Ok(ReliabilitySignals {
        h_src,
        r_src,
        h_exp,
        cos_per_sample,
        d_js,
        w_cos_per_sample,
    })
}

/// `lambda * r_src * (1 + alpha * h_exp + beta * d_js)`.
pub fn effective_anchor_coeff(r_src: f64, h_exp: f64, d_js: f64, lambda: f64, alpha: f64, beta: f64) -> f64 {
    lambda * r_src * (1.0 + alpha * h_exp + beta * d_js)
}
