//! Self-checks run by the `verify` command: the source-collapse invariance,
//! finite-difference gradient oracles and brute-force statistic oracles.

use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::{Adapter, ControllerSpec};
use crate::analysis::{auc, paired_t, spearman, PairedSample};
use crate::config::{AdapterConfig, Preset};
use crate::error::Result;
use crate::gate::{compute_signals_with, effective_anchor_coeff, GateMode};
use crate::matrix::Matrix;
use crate::model::{flip_transform, l2_distance_sq, train_source, Architecture, ModelState, ParameterSet, TrainConfig};
use crate::numerics::{kl_raw, logsumexp, normalized_entropy_raw, softmax_raw, Posterior, SeededRng};
use crate::objective::{anchor_loss, marginal_loss, slr_loss, symce_consistency, symce_value, total_loss, PriorState};
use crate::streams::{StreamSpec, Task, TaskSpec};

/// One row of the pass/fail matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed discrepancy, in the unit of `tolerance`.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn le(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradient magnitudes below this are compared on absolute error scaled by it.
pub const FD_FLOOR: f64 = 1e-5;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FD_FLOOR)
}

fn central_diff(x: &[f64], i: usize, f: &impl Fn(&[f64]) -> f64) -> f64 {
    let mut up = x.to_vec();
    up[i] += FD_STEP;
    let mut dn = x.to_vec();
    dn[i] -= FD_STEP;
    (f(&up) - f(&dn)) / (2.0 * FD_STEP)
}

fn worst_fd(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    (0..x.len()).map(|i| rel_err(analytic[i], central_diff(x, i, &f))).fold(0.0, f64::max)
}

fn rand_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, rng.gaussian_draw(rows * cols).into_iter().map(|v| scale * v).collect())
        .expect("shape matches data")
}

fn as_matrix(rows: usize, cols: usize, flat: &[f64]) -> Matrix {
    Matrix::from_vec(rows, cols, flat.to_vec()).expect("shape matches data")
}

fn rand_posterior(rng: &mut SeededRng, c: usize) -> Posterior {
    let raw: Vec<f64> = (0..c).map(|_| 0.05 + rng.uniform()).collect();
    let s: f64 = raw.iter().sum();
    Posterior::new(raw.iter().map(|v| v / s).collect()).expect("normalized")
}

/// SLR with soft targets held at the base point.
pub fn check_slr_gradient(configs: usize, seed: u64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (b, c) = (2 + rng.below(6), 2 + rng.below(7));
        let scale = 0.5 + 2.5 * rng.uniform();
        let z = rand_matrix(&mut rng, b, c, scale);
        let w: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
        let out = slr_loss(&z, &w)?;
        let targets: Vec<Vec<f64>> = z.iter_rows().map(softmax_raw).collect();
        let f = |flat: &[f64]| {
            let mut v = 0.0;
            for i in 0..b {
                let row = &flat[i * c..(i + 1) * c];
                for k in 0..c {
                    let others: Vec<f64> = (0..c).filter(|j| *j != k).map(|j| row[j]).collect();
                    v -= w[i] * targets[i][k] * (row[k] - logsumexp(&others));
                }
            }
            v / b as f64
        };
        worst = worst.max(worst_fd(z.as_slice(), out.d_logits.as_slice(), f));
    }
    Ok(Check::le("gradient/slr", worst, FD_REL_TOL, format!("{configs} configs, max rel err")))
}

/// Symmetric cross-entropy, both views.
pub fn check_symce_gradient(configs: usize, seed: u64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (b, c) = (2 + rng.below(6), 2 + rng.below(7));
        let z = rand_matrix(&mut rng, b, c, 2.0);
        let za = rand_matrix(&mut rng, b, c, 2.0);
        let w: Vec<f64> = (0..b).map(|_| 0.2 + rng.uniform()).collect();
        let out = symce_consistency(&z, &za, &w)?;
        let value = |x: &Matrix, y: &Matrix| {
            let px: Vec<Posterior> = x.iter_rows().map(|r| Posterior::new(softmax_raw(r)).unwrap()).collect();
            let py: Vec<Posterior> = y.iter_rows().map(|r| Posterior::new(softmax_raw(r)).unwrap()).collect();
            (0..b)
                .map(|i| w[i] * symce_value(&px[i..=i], &py[i..=i]).unwrap())
                .sum::<f64>()
                / b as f64
        };
        worst = worst.max(worst_fd(z.as_slice(), out.d_logits.as_slice(), |f| value(&as_matrix(b, c, f), &za)));
        worst = worst.max(worst_fd(za.as_slice(), out.d_logits_aug.as_slice(), |f| value(&z, &as_matrix(b, c, f))));
    }
    Ok(Check::le("gradient/symce", worst, FD_REL_TOL, format!("{configs} configs, max rel err")))
}

/// Marginal KL against a fixed prior.
pub fn check_marginal_gradient(configs: usize, seed: u64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (b, c) = (2 + rng.below(6), 2 + rng.below(7));
        let z = rand_matrix(&mut rng, b, c, 1.5);
        let prior = PriorState {
            p_prior: rand_posterior(&mut rng, c),
            rho: 0.01,
        };
        let out = marginal_loss(&z, &prior)?;
        let f = |flat: &[f64]| {
            let mut m = vec![0.0; c];
            for i in 0..b {
                for (mk, p) in m.iter_mut().zip(softmax_raw(&flat[i * c..(i + 1) * c])) {
                    *mk += p / b as f64;
                }
            }
            kl_raw(&m, prior.p_prior.probs())
        };
        worst = worst.max(worst_fd(z.as_slice(), out.d_logits.as_slice(), f));
    }
    Ok(Check::le("gradient/marginal", worst, FD_REL_TOL, format!("{configs} configs, max rel err")))
}

fn random_arch(rng: &mut SeededRng) -> Architecture {
    let layers = 1 + rng.below(2);
    Architecture {
        input_dim: 3 + rng.below(5),
        hidden: (0..layers).map(|_| 3 + rng.below(4)).collect(),
        classes: 3 + rng.below(3),
    }
}

/// Source plus an expert whose affine parameters are displaced from it.
fn displaced_state(rng: &mut SeededRng, arch: &Architecture, spread: f64) -> Result<ModelState> {
    let mut src = ParameterSet::random(arch, rng)?;
    let mut t = src.affine_flat();
    t.iter_mut().for_each(|v| *v += 0.2 * rng.normal());
    src.set_affine_flat(&t)?;
    let mut exp = src.clone();
    t.iter_mut().for_each(|v| *v += spread * rng.normal());
    exp.set_affine_flat(&t)?;
    ModelState::with_snapshot(exp, src)
}

fn with_affine(state: &ModelState, theta: &[f64]) -> ModelState {
    let mut p = state.params().clone();
    p.set_affine_flat(theta).expect("same length");
    ModelState::with_snapshot(p, state.source().clone()).expect("same shape")
}

/// Anchor penalty on the adaptable parameters.
pub fn check_anchor_gradient(configs: usize, seed: u64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let arch = random_arch(&mut rng);
        let state = displaced_state(&mut rng, &arch, 0.3)?;
        let x = rand_matrix(&mut rng, 5, arch.input_dim, 1.0);
        let p_src: Vec<Posterior> = state.source().logits(&x)?.iter_rows().map(|r| Posterior::new(softmax_raw(r)).unwrap()).collect();
        let p_exp: Vec<Posterior> = state.params().logits(&x)?.iter_rows().map(|r| Posterior::new(softmax_raw(r)).unwrap()).collect();
        let signals = compute_signals_with(&p_src, &p_exp, 0.5, Default::default(), GateMode::Reliability)?;
        let (lambda, alpha, beta) = (4.0 * rng.uniform(), 3.0 * rng.uniform(), 2.0 * rng.uniform());
        let out = anchor_loss(&state, &signals, lambda, alpha, beta)?;
        let coeff = effective_anchor_coeff(signals.r_src, signals.h_exp, signals.d_js, lambda, alpha, beta);
        let theta = state.params().affine_flat();
        let f = |t: &[f64]| coeff * l2_distance_sq(with_affine(&state, t).params(), state.source()).unwrap();
        worst = worst.max(worst_fd(&theta, &out.grad, f));
    }
    Ok(Check::le("gradient/anchor", worst, FD_REL_TOL, format!("{configs} configs, max rel err")))
}

/// The summed objective through the network, with every quantity the
/// update treats as constant (agreement weights, soft targets, updated
/// prior and, unless differentiable, the anchor coefficient) frozen at the
/// base point.
pub fn check_total_gradient(configs: usize, seed: u64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for k in 0..configs {
        let arch = random_arch(&mut rng);
        let state = displaced_state(&mut rng, &arch, 0.3)?;
        let b = 4 + rng.below(4);
        let x = rand_matrix(&mut rng, b, arch.input_dim, 1.5);
        let cfg = AdapterConfig {
            lambda: 4.0 * rng.uniform(),
            alpha: 3.0 * rng.uniform(),
            beta: 2.0 * rng.uniform(),
            lambda_marg: rng.uniform(),
            w_min: rng.uniform(),
            certainty_weighting: k % 3 == 1,
            differentiable_anchor: k % 2 == 1,
            ..AdapterConfig::default()
        };
        let prior = PriorState {
            p_prior: rand_posterior(&mut rng, arch.classes),
            rho: 0.05,
        };
        let base = total_loss(&x, &state, &prior, &cfg)?;
        let weights = base.breakdown.sample_weights.clone();
        let z0 = state.params().logits(&x)?;
        let targets: Vec<Vec<f64>> = z0.iter_rows().map(softmax_raw).collect();
        let frozen_prior = base.prior.p_prior.clone();
        let r_src = base.signals.r_src;
        let p_src: Vec<Vec<f64>> = state.source().logits(&x)?.iter_rows().map(softmax_raw).collect();
        let flipped = flip_transform(&x);
        let c = arch.classes;
        let f = |t: &[f64]| {
            let st = with_affine(&state, t);
            let z = st.params().logits(&x).unwrap();
            let za = st.params().logits(&flipped).unwrap();
            let mut base_terms = 0.0;
            let mut marginal = vec![0.0; c];
            let (mut h_exp, mut d_js) = (0.0, 0.0);
            for i in 0..b {
                let row = z.row(i);
                let mut slr = 0.0;
                for k in 0..c {
                    let others: Vec<f64> = (0..c).filter(|j| *j != k).map(|j| row[j]).collect();
                    slr -= targets[i][k] * (row[k] - logsumexp(&others));
                }
                let p = Posterior::new(softmax_raw(row)).unwrap();
                let q = Posterior::new(softmax_raw(za.row(i))).unwrap();
                let cons = symce_value(std::slice::from_ref(&p), std::slice::from_ref(&q)).unwrap();
                base_terms += weights[i] * (slr + cons);
                for (m, v) in marginal.iter_mut().zip(p.probs()) {
                    *m += v / b as f64;
                }
                h_exp += normalized_entropy_raw(p.probs()) / b as f64;
                d_js += crate::numerics::js_raw(&p_src[i], p.probs()) / b as f64;
            }
            let coeff = if cfg.differentiable_anchor {
                effective_anchor_coeff(r_src, h_exp, d_js, cfg.lambda, cfg.alpha, cfg.beta)
            } else {
                base.lambda_eff
            };
            base_terms / b as f64
                + cfg.lambda_marg * kl_raw(&marginal, frozen_prior.probs())
                + coeff * l2_distance_sq(st.params(), st.source()).unwrap()
        };
        worst = worst.max(worst_fd(&state.params().affine_flat(), &base.grad, f));
    }
    Ok(Check::le("gradient/total", worst, FD_REL_TOL, format!("{configs} configs, max rel err")))
}

pub fn gradient_checks(configs: usize, seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        check_slr_gradient(configs, seed)?,
        check_symce_gradient(configs, seed + 1)?,
        check_marginal_gradient(configs, seed + 2)?,
        check_anchor_gradient(configs, seed + 3)?,
        check_total_gradient(configs, seed + 4)?,
    ])
}

/// Outcome of running the same adaptation against two different source snapshots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseReport {
    pub batches: usize,
    /// Largest `|theta_a - theta_b|` over all batches and adaptable parameters.
    pub max_param_diff: f64,
    pub max_l_anch: f64,
    /// Largest `|w_cos - 1|` over all batches and samples.
    pub max_w_dev: f64,
    pub max_r_src: f64,
}

/// Adapts one expert against two uniform-posterior sources (zero output
/// weights) that differ everywhere else, and measures how far the two
/// trajectories drift apart.
pub fn source_collapse_run(batches: usize, gate: GateMode) -> Result<CollapseReport> {
    let arch = Architecture::default();
    let task = Task::new(&TaskSpec::default())?;
    let mut rng = SeededRng::new(7);
    let train = task.sample_uniform(1000, &mut rng)?;
    let trained = train_source(&arch, &train, &TrainConfig { epochs: 150, ..TrainConfig::default() }, &mut rng)?;
    let mut src_a = trained.clone();
    src_a.output = Matrix::zeros(arch.classes, *arch.hidden.last().unwrap());
    let mut src_b = ParameterSet::random(&arch, &mut rng.derive(0xb))?;
    let mut t = src_b.affine_flat();
    t.iter_mut().for_each(|v| *v += rng.normal());
    src_b.set_affine_flat(&t)?;
    src_b.output = Matrix::zeros(arch.classes, *arch.hidden.last().unwrap());

    let stream = StreamSpec {
        batches,
        ..StreamSpec::default()
    }
    .generate()?;
    let cfg = AdapterConfig {
        eta: 0.01,
        gate,
        ..Preset::GatedFull.apply(&AdapterConfig::default())
    };
    let mut a = Adapter::new(ModelState::with_snapshot(trained.clone(), src_a)?, cfg.clone(), ControllerSpec::None)?;
    let mut b = Adapter::new(ModelState::with_snapshot(trained, src_b)?, cfg, ControllerSpec::None)?;
    let mut report = CollapseReport {
        batches,
        max_param_diff: 0.0,
        max_l_anch: 0.0,
        max_w_dev: 0.0,
        max_r_src: 0.0,
    };
    for batch in &stream {
        let oa = a.step(batch)?;
        let ob = b.step(batch)?;
        let diff = a
            .state
            .params()
            .affine_flat()
            .iter()
            .zip(b.state.params().affine_flat())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        report.max_param_diff = report.max_param_diff.max(diff);
        for o in [&oa, &ob] {
            report.max_l_anch = report.max_l_anch.max(o.breakdown.l_anch.abs());
            report.max_r_src = report.max_r_src.max(o.record.r_src);
            let dev = o.breakdown.sample_weights.iter().map(|w| (w - 1.0).abs()).fold(0.0, f64::max);
            report.max_w_dev = report.max_w_dev.max(dev);
        }
    }
    Ok(report)
}

pub const COLLAPSE_TOL: f64 = 1e-10;

pub fn collapse_check(batches: usize, gate: GateMode) -> Result<Check> {
    let r = source_collapse_run(batches, gate)?;
    let passed = r.max_param_diff <= COLLAPSE_TOL && r.max_l_anch == 0.0 && r.max_w_dev == 0.0;
    Ok(Check {
        name: "source-collapse invariance".into(),
        passed,
        measured: r.max_param_diff,
        tolerance: COLLAPSE_TOL,
        detail: format!(
            "{} batches: theta* dependence {:.3e}, max L_anch {:.3e}, max |w_cos - 1| {:.3e}, max r_src {:.3e}",
            r.batches, r.max_param_diff, r.max_l_anch, r.max_w_dev, r.max_r_src
        ),
    })
}

/// Exhaustive pair count.
pub fn auc_by_enumeration(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Rank by counting smaller and equal values; correlation by the
/// one-pass sum formula.
pub fn spearman_by_counting(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (sx, sy) = (rx.iter().sum::<f64>(), ry.iter().sum::<f64>());
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|a| a * a).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Two-sided p of the paired t statistic by resampling null datasets of
/// `n` Gaussian differences.
pub fn t_pvalue_by_resampling(t_obs: f64, n: usize, resamples: usize, rng: &mut SeededRng) -> f64 {
    let mut hits = 0usize;
    let mut d = vec![0.0; n];
    for _ in 0..resamples {
        d.iter_mut().for_each(|v| *v = rng.normal());
        let m = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = m / (var.sqrt() / (n as f64).sqrt());
        if t.abs() >= t_obs.abs() {
            hits += 1;
        }
    }
    hits as f64 / resamples as f64
}

pub fn check_auc_oracle(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (np, nn) = (1 + rng.below(20), 1 + rng.below(20));
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| (rng.uniform() * 8.0).floor()).collect() };
        let (pos, neg) = (draw(np), draw(nn));
        worst = worst.max((auc(&pos, &neg)? - auc_by_enumeration(&pos, &neg)).abs());
    }
    Ok(Check::le("stats/auc vs pair enumeration", worst, 1e-12, format!("{instances} instances, max abs diff")))
}

pub fn check_spearman_oracle(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let n = 3 + rng.below(18);
        let x: Vec<f64> = (0..n).map(|_| (rng.uniform() * 6.0).floor()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + (rng.normal() * 2.0).round()).collect();
        let Ok(fast) = spearman(&x, &y) else { continue };
        worst = worst.max((fast - spearman_by_counting(&x, &y)).abs());
        done += 1;
    }
    Ok(Check::le("stats/spearman vs counting ranker", worst, 1e-12, format!("{instances} instances, max abs diff")))
}

/// Passes when every instance lies within `z_tol` resampling standard errors.
pub fn check_ttest_oracle(instances: usize, resamples: usize, seed: u64, z_tol: f64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let mut cases = Vec::with_capacity(instances);
    while cases.len() < instances {
        let n = 3 + rng.below(8);
        let shift = rng.normal();
        let a: Vec<f64> = (0..n).map(|_| 20.0 + rng.normal()).collect();
        let b: Vec<f64> = a.iter().map(|v| v + shift + rng.normal()).collect();
        let r = paired_t(&PairedSample::new(vec![String::new(); n], a, b)?)?;
        if let (Some(t), Some(p)) = (r.t, r.p) {
            cases.push((n, t, p, rng.derive(cases.len() as u64)));
        }
    }
    let z: Vec<f64> = cases
        .into_par_iter()
        .map(|(n, t, p, mut r)| {
            let mc = t_pvalue_by_resampling(t, n, resamples, &mut r);
            let se = (p * (1.0 - p) / resamples as f64).sqrt().max(1.0 / resamples as f64);
            (p - mc).abs() / se
        })
        .collect();
    let worst = z.into_iter().fold(0.0, f64::max);
    Ok(Check::le(
        "stats/paired-t p vs null resampling",
        worst,
        z_tol,
        format!("{instances} instances x {resamples} resamples, max |p - p_mc| / se"),
    ))
}

pub fn stats_checks(instances: usize, resamples: usize, seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        check_auc_oracle(instances, seed)?,
        check_spearman_oracle(instances, seed + 1)?,
        check_ttest_oracle(instances, resamples, seed + 2, 4.5)?,
    ])
}
