//! Loss terms of the adaptation objective and their gradients.
//!
//! Every gradient here is taken w.r.t. expert logits, except the anchor
//! whose gradient lives directly on the adaptable parameters. Sample
//! weights (`w_cos`) and the anchor coefficient are treated as constants
//! within a step unless `differentiable_anchor` is set.

use crate::config::AdapterConfig;
use crate::error::{invalid, Error, Result};
use crate::gate::{compute_signals_with, effective_anchor_coeff, ReliabilitySignals};
use crate::matrix::Matrix;
use crate::model::{flip_transform, l2_distance_sq, ModelState};
use crate::numerics::{
    entropy_nats, kl_raw, log_softmax_raw, logsumexp, softmax_raw, Posterior, PROB_FLOOR,
};

fn check_weights(rows: usize, weights: &[f64]) -> Result<()> {
    if weights.len() != rows {
        return Err(invalid("one weight per sample required"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(invalid("sample weights must be finite and >= 0"));
    }
    Ok(())
}

fn check_logits(z: &Matrix) -> Result<()> {
    if z.cols() < 2 {
        return Err(invalid("need at least 2 classes"));
    }
    if z.rows() == 0 {
        return Err(invalid("empty batch"));
    }
    if !z.all_finite() {
        return Err(invalid("non-finite logits"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BaseLoss {
    /// `(1/B) * sum_i w_i * loss_i`.
    pub value: f64,
    /// Unweighted per-sample losses.
    pub per_sample: Vec<f64>,
    pub d_logits: Matrix,
}

/// Soft likelihood ratio: `-sum_c p_c (z_c - logsumexp_{j != c} z_j)` with
/// `p = softmax(z)` detached.
pub fn slr_loss(logits: &Matrix, weights: &[f64]) -> Result<BaseLoss> {
    check_logits(logits)?;
    check_weights(logits.rows(), weights)?;
    let (b, c) = logits.shape();
    let mut d_logits = Matrix::zeros(b, c);
    let mut per_sample = Vec::with_capacity(b);
    let mut value = 0.0;
    let mut others = Vec::with_capacity(c - 1);
    for i in 0..b {
        let z = logits.row(i);
        let p = softmax_raw(z);
        let lse_wo: Vec<f64> = (0..c)
            .map(|k| {
                others.clear();
                others.extend(z.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| *v));
                logsumexp(&others)
            })
            .collect();
        let loss: f64 = -(0..c).map(|k| p[k] * (z[k] - lse_wo[k])).sum::<f64>();
        per_sample.push(loss);
        value += weights[i] * loss;
        let scale = weights[i] / b as f64;
        let row = d_logits.row_mut(i);
        for k in 0..c {
            let mut g = -p[k];
            for cc in 0..c {
                if cc != k {
                    g += p[cc] * (z[k] - lse_wo[cc]).exp();
                }
            }
            row[k] = scale * g;
        }
    }
    Ok(BaseLoss {
        value: value / b as f64,
        per_sample,
        d_logits,
    })
}

#[derive(Debug, Clone)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub d_logits: Matrix,
    pub d_logits_aug: Matrix,
}

fn floored_log(lp: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let floor = PROB_FLOOR.ln();
    let active: Vec<bool> = lp.iter().map(|v| *v > floor).collect();
    (lp.iter().map(|v| v.max(floor)).collect(), active)
}

/// Symmetric cross-entropy `-sum p log q - sum q log p` between the
/// posteriors of two logit sets, logs floored at `log(PROB_FLOOR)`.
pub fn symce_consistency(logits: &Matrix, logits_aug: &Matrix, weights: &[f64]) -> Result<ConsistencyLoss> {
    check_logits(logits)?;
    check_logits(logits_aug)?;
    if logits.shape() != logits_aug.shape() {
        return Err(invalid("consistency views differ in shape"));
    }
    check_weights(logits.rows(), weights)?;
    let (b, c) = logits.shape();
    let mut d = Matrix::zeros(b, c);
    let mut d_aug = Matrix::zeros(b, c);
    let mut per_sample = Vec::with_capacity(b);
    let mut value = 0.0;
    for i in 0..b {
        let p = softmax_raw(logits.row(i));
        let q = softmax_raw(logits_aug.row(i));
        let (fp, ap) = floored_log(&log_softmax_raw(logits.row(i)));
        let (fq, aq) = floored_log(&log_softmax_raw(logits_aug.row(i)));
        let a: f64 = -(0..c).map(|k| p[k] * fq[k]).sum::<f64>();
        let bb: f64 = -(0..c).map(|k| q[k] * fp[k]).sum::<f64>();
        per_sample.push(a + bb);
        value += weights[i] * (a + bb);
        let s = weights[i] / b as f64;
        let p_act_q: f64 = (0..c).filter(|k| aq[*k]).map(|k| p[k]).sum();
        let q_act_p: f64 = (0..c).filter(|k| ap[*k]).map(|k| q[k]).sum();
        let row = d.row_mut(i);
        for k in 0..c {
            let da = -p[k] * (fq[k] + a);
            let db = -q[k] * f64::from(u8::from(ap[k])) + p[k] * q_act_p;
            row[k] = s * (da + db);
        }
        let row = d_aug.row_mut(i);
        for k in 0..c {
            let db = -q[k] * (fp[k] + bb);
            let da = -p[k] * f64::from(u8::from(aq[k])) + q[k] * p_act_q;
            row[k] = s * (da + db);
        }
    }
    Ok(ConsistencyLoss {
        value: value / b as f64,
        per_sample,
        d_logits: d,
        d_logits_aug: d_aug,
    })
}

/// Batch-mean symmetric cross-entropy on posteriors (value only).
pub fn symce_value(p: &[Posterior], q: &[Posterior]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(invalid("consistency views differ in batch size"));
    }
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        if a.classes() != b.classes() {
            return Err(invalid("class count mismatch"));
        }
        let ce = |x: &[f64], y: &[f64]| -> f64 {
            -x.iter().zip(y).map(|(xi, yi)| xi * yi.max(PROB_FLOOR).ln()).sum::<f64>()
        };
        total += ce(a.probs(), b.probs()) + ce(b.probs(), a.probs());
    }
    Ok(total / p.len() as f64)
}

/// Exponential moving average of batch class marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorState {
    pub p_prior: Posterior,
    pub rho: f64,
}

impl PriorState {
    pub fn uniform(classes: usize, rho: f64) -> Self {
        Self {
            p_prior: Posterior::uniform(classes),
            rho,
        }
    }
}

/// `(1 - rho) * prior + rho * marginal`.
pub fn update_prior(prior: &PriorState, batch_marginal: &Posterior) -> Result<PriorState> {
    if !(prior.rho > 0.0 && prior.rho < 1.0) {
        return Err(invalid("rho must lie in (0, 1)"));
    }
    if prior.p_prior.classes() != batch_marginal.classes() {
        return Err(invalid("class count mismatch"));
    }
    let mut v: Vec<f64> = prior
        .p_prior
        .probs()
        .iter()
        .zip(batch_marginal.probs())
        .map(|(p, m)| (1.0 - prior.rho) * p + prior.rho * m)
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    Ok(PriorState {
        p_prior: Posterior::new(v)?,
        rho: prior.rho,
    })
}

/// Mean of the row softmaxes.
pub fn batch_marginal(logits: &Matrix) -> Posterior {
    let (b, c) = logits.shape();
    let mut m = vec![0.0; c];
    for row in logits.iter_rows() {
        for (mi, p) in m.iter_mut().zip(softmax_raw(row)) {
            *mi += p / b as f64;
        }
    }
    let s: f64 = m.iter().sum();
    m.iter_mut().for_each(|x| *x /= s);
    Posterior::from_trusted(m)
}

#[derive(Debug, Clone)]
pub struct MarginalLoss {
    pub value: f64,
    pub marginal: Posterior,
    pub d_logits: Matrix,
}

/// `KL(mean_i softmax(z_i) || prior)`; the prior is a constant.
pub fn marginal_loss(logits: &Matrix, prior: &PriorState) -> Result<MarginalLoss> {
    check_logits(logits)?;
    if prior.p_prior.classes() != logits.cols() {
        return Err(invalid("prior class count mismatch"));
    }
    let (b, c) = logits.shape();
    let marginal = batch_marginal(logits);
    let value = kl_raw(marginal.probs(), prior.p_prior.probs());
    let g: Vec<f64> = marginal
        .probs()
        .iter()
        .zip(prior.p_prior.probs())
        .map(|(m, p)| m.max(PROB_FLOOR).ln() - p.max(PROB_FLOOR).ln())
        .collect();
    let mut d_logits = Matrix::zeros(b, c);
    for i in 0..b {
        let p = softmax_raw(logits.row(i));
        let inner: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let row = d_logits.row_mut(i);
        for k in 0..c {
            row[k] = p[k] * (g[k] - inner) / b as f64;
        }
    }
    Ok(MarginalLoss {
        value,
        marginal,
        d_logits,
    })
}

#[derive(Debug, Clone)]
pub struct AnchorLoss {
    pub value: f64,
    pub coeff: f64,
    pub distance_sq: f64,
    /// Gradient on the adaptable parameters, `affine_flat` order.
    pub grad: Vec<f64>,
}

/// `lambda_eff * ||theta_exp - theta_src||^2` over the adaptable subset.
pub fn anchor_loss(state: &ModelState, signals: &ReliabilitySignals, lambda: f64, alpha: f64, beta: f64) -> Result<AnchorLoss> {
    let coeff = effective_anchor_coeff(signals.r_src, signals.h_exp, signals.d_js, lambda, alpha, beta);
    let distance_sq = l2_distance_sq(state.params(), state.source())?;
    let grad = if coeff == 0.0 {
        vec![0.0; state.arch().adaptable_count()]
    } else {
        state
            .params()
            .affine_flat()
            .iter()
            .zip(state.source().affine_flat())
            .map(|(t, s)| 2.0 * coeff * (t - s))
            .collect()
    };
    Ok(AnchorLoss {
        value: coeff * distance_sq,
        coeff,
        distance_sq,
        grad,
    })
}

/// `eta * (eta_min + (1 - eta_min) * (1 - h_exp))`.
pub fn effective_lr(eta: f64, eta_min: f64, h_exp: f64) -> f64 {
    eta * (eta_min + (1.0 - eta_min) * (1.0 - h_exp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Agreement-weighted batch mean of the SLR term.
    pub l_slr: f64,
    /// Agreement-weighted batch mean of the consistency term.
    pub l_cons: f64,
    pub l_marg: f64,
    pub l_anch: f64,
    pub total: f64,
    pub slr_per_sample: Vec<f64>,
    pub cons_per_sample: Vec<f64>,
    /// Final per-sample base-loss weights (`w_cos`, times certainty if enabled).
    pub sample_weights: Vec<f64>,
}

/// Everything the optimizer and trace need from one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct StepObjective {
    pub breakdown: LossBreakdown,
    pub grad: Vec<f64>,
    pub signals: ReliabilitySignals,
    pub lambda_eff: f64,
    /// Prior after folding in this batch's marginal.
    pub prior: PriorState,
}

fn posteriors(logits: &Matrix) -> Vec<Posterior> {
    logits.iter_rows().map(|r| Posterior::from_trusted(softmax_raw(r))).collect()
}

fn add_into(acc: &mut Matrix, other: &Matrix, scale: f64) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += scale * b;
    }
}

/// Evaluates the full objective for one batch: signals, base losses on the
/// original and flipped view, prior update, marginal term, anchor, and the
/// summed gradient on the adaptable parameters.
pub fn total_loss(inputs: &Matrix, state: &ModelState, prior: &PriorState, cfg: &AdapterConfig) -> Result<StepObjective> {
    let src_logits = state.source().logits(inputs)?;
    let flipped = flip_transform(inputs);
    let cache = state.params().forward_cached(inputs)?;
    let cache_aug = state.params().forward_cached(&flipped)?;
    let z = &cache.logits;
    let z_aug = &cache_aug.logits;
    if !z.all_finite() || !z_aug.all_finite() || !src_logits.all_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let p_src = posteriors(&src_logits);
    let p_exp = posteriors(z);
    let signals = compute_signals_with(&p_src, &p_exp, cfg.w_min, cfg.entropy_reduction, cfg.gate)?;

    let mut weights = signals.w_cos_per_sample.clone();
    if cfg.certainty_weighting {
        for (w, p) in weights.iter_mut().zip(&p_exp) {
            *w *= (-entropy_nats(p.probs())).exp();
        }
    }
    let slr = slr_loss(z, &weights)?;
    let cons = symce_consistency(z, z_aug, &weights)?;

    let new_prior = update_prior(prior, &batch_marginal(z))?;
    let marg = marginal_loss(z, &new_prior)?;
    let anch = anchor_loss(state, &signals, cfg.lambda, cfg.alpha, cfg.beta)?;

    let mut dz = slr.d_logits.clone();
    add_into(&mut dz, &cons.d_logits, 1.0);
    add_into(&mut dz, &marg.d_logits, cfg.lambda_marg);
    if cfg.differentiable_anchor && anch.distance_sq > 0.0 && signals.r_src > 0.0 {
        add_into(&mut dz, &anchor_coeff_logit_grad(z, &p_src, &signals, cfg, anch.distance_sq), 1.0);
    }

    let mut grad = state.params().backward_affine_cached(&cache, &dz)?;
    let grad_aug = state.params().backward_affine_cached(&cache_aug, &cons.d_logits_aug)?;
    for ((g, ga), gan) in grad.iter_mut().zip(&grad_aug).zip(&anch.grad) {
        *g += ga + gan;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }

    let total = slr.value + cons.value + cfg.lambda_marg * marg.value + anch.value;
    if !total.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok(StepObjective {
        breakdown: LossBreakdown {
            l_slr: slr.value,
            l_cons: cons.value,
            l_marg: marg.value,
            l_anch: anch.value,
            total,
            slr_per_sample: slr.per_sample,
            cons_per_sample: cons.per_sample,
            sample_weights: weights,
        },
        grad,
        signals,
        lambda_eff: anch.coeff,
        prior: new_prior,
    })
}

/// Gradient of `lambda * r * (alpha * h_exp + beta * d_js) * dist` w.r.t.
/// expert logits, for the differentiable-coefficient variant.
fn anchor_coeff_logit_grad(z: &Matrix, p_src: &[Posterior], s: &ReliabilitySignals, cfg: &AdapterConfig, dist: f64) -> Matrix {
    let (b, c) = z.shape();
    let k = cfg.lambda * s.r_src * dist / b as f64;
    let log_c = (c as f64).ln();
    let mut out = Matrix::zeros(b, c);
    for i in 0..b {
        let p = softmax_raw(z.row(i));
        let h = entropy_nats(&p);
        let src = p_src[i].probs();
        let g_js: Vec<f64> = p
            .iter()
            .zip(src)
            .map(|(pk, sk)| {
                let m = 0.5 * (pk + sk);
                0.5 * (pk.max(PROB_FLOOR).ln() - m.max(PROB_FLOOR).ln())
            })
            .collect();
        let inner_js: f64 = p.iter().zip(&g_js).map(|(a, g)| a * g).sum();
        let row = out.row_mut(i);
        for j in 0..c {
            let dh = if p[j] > 0.0 { -p[j] * (p[j].ln() + h) } else { 0.0 };
            let djs = p[j] * (g_js[j] - inner_js);
            row[j] = k * (cfg.alpha * dh / log_c + cfg.beta * djs);
        }
    }
    out
}
