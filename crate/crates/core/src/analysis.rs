//! Statistical battery: harm slopes, paired tests, correlations, AUC,
//! sliding windows and win/tie/loss counts. All errors are in percent.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::adapter::RunTrace;
use crate::error::{invalid, Error, Result};

/// `(err(S_min) - err(S_max)) / (S_max - S_min)`, pp per unit of `S`.
pub fn harm_slope(err_at_smin: f64, err_at_smax: f64, s_min: f64, s_max: f64) -> Result<f64> {
    if !(s_max > s_min) {
        return Err(invalid(format!("need S_max > S_min, got S_min = {s_min}, S_max = {s_max}")));
    }
    Ok((err_at_smin - err_at_smax) / (s_max - s_min))
}

/// One labelled error measurement in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub method: String,
    pub ordering: String,
    pub s_target: f64,
    pub seed: u64,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmSlope {
    pub method: String,
    pub s_min: f64,
    pub s_max: f64,
    /// `(ordering, slope)` from seed-mean endpoints, sorted by ordering.
    pub per_ordering: Vec<(String, f64)>,
    /// Mean of the per-ordering slopes.
    pub mean: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Slope per ordering from seed-mean errors at the extreme `S` levels, then
/// averaged over orderings.
pub fn harm_slope_by_ordering(points: &[ErrorPoint], method: &str) -> Result<HarmSlope> {
    let mine: Vec<&ErrorPoint> = points.iter().filter(|p| p.method == method).collect();
    if mine.is_empty() {
        return Err(invalid(format!("no rows for method `{method}`")));
    }
    let s_min = mine.iter().map(|p| p.s_target).fold(f64::INFINITY, f64::min);
    let s_max = mine.iter().map(|p| p.s_target).fold(f64::NEG_INFINITY, f64::max);
    let mut by_ordering: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in &mine {
        let entry = by_ordering.entry(p.ordering.as_str()).or_default();
        if p.s_target == s_min {
            entry.0.push(p.err);
        } else if p.s_target == s_max {
            entry.1.push(p.err);
        }
    }
    let mut per_ordering = Vec::with_capacity(by_ordering.len());
    for (ordering, (lo, hi)) in by_ordering {
        if lo.is_empty() || hi.is_empty() {
            return Err(invalid(format!(
                "method `{method}`, ordering `{ordering}` lacks a run at S = {s_min} or S = {s_max}"
            )));
        }
        per_ordering.push((ordering.to_string(), harm_slope(mean(&lo), mean(&hi), s_min, s_max)?));
    }
    let slope_mean = per_ordering.iter().map(|(_, s)| s).sum::<f64>() / per_ordering.len() as f64;
    Ok(HarmSlope {
        method: method.to_string(),
        s_min,
        s_max,
        per_ordering,
        mean: slope_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub h_anchor: f64,
    pub h_other: f64,
    /// `r_bar * h_anchor + h_other`, for self-consistency.
    pub predicted_h_b: f64,
}

/// Solves `h_a = h_anchor + h_other`, `h_b = r_bar * h_anchor + h_other`.
pub fn slope_decomposition(h_a: f64, h_b: f64, r_bar: f64) -> Result<Decomposition> {
    if r_bar == 1.0 {
        return Err(Error::Degenerate("r_bar = 1 leaves the anchored slope unidentified".into()));
    }
    if !(0.0..1.0).contains(&r_bar) {
        return Err(invalid(format!("r_bar = {r_bar} outside [0, 1)")));
    }
    let h_anchor = (h_a - h_b) / (1.0 - r_bar);
    let h_other = h_a - h_anchor;
    Ok(Decomposition {
        h_anchor,
        h_other,
        predicted_h_b: r_bar * h_anchor + h_other,
    })
}

/// Index-aligned paired errors; `a` is the method under test, `b` the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub labels: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(labels: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || labels.len() != a.len() {
            return Err(invalid("paired sample lengths differ"));
        }
        if a.len() < 2 {
            return Err(invalid("paired sample needs at least 2 pairs"));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(invalid("paired sample contains a non-finite error"));
        }
        Ok(Self { labels, a, b })
    }

    /// Pairs two labelled series by identifier; both must carry the same set.
    pub fn align(a: &[(String, f64)], b: &[(String, f64)]) -> Result<Self> {
        let index = |xs: &[(String, f64)], which: &str| -> Result<BTreeMap<String, f64>> {
            let mut m = BTreeMap::new();
            for (k, v) in xs {
                if m.insert(k.clone(), *v).is_some() {
                    return Err(invalid(format!("duplicate label `{k}` in series {which}")));
                }
            }
            Ok(m)
        };
        let (ma, mb) = (index(a, "a")?, index(b, "b")?);
        if let Some(k) = ma.keys().find(|k| !mb.contains_key(*k)) {
            return Err(invalid(format!("label `{k}` missing from series b")));
        }
        if let Some(k) = mb.keys().find(|k| !ma.contains_key(*k)) {
            return Err(invalid(format!("label `{k}` missing from series a")));
        }
        let labels: Vec<String> = ma.keys().cloned().collect();
        let b_vals = labels.iter().map(|k| mb[k]).collect();
        Self::new(labels, ma.into_values().collect(), b_vals)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// `a_i - b_i`.
    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    /// Mean of `a - b`, pp.
    pub delta_mean: f64,
    pub t: Option<f64>,
    /// Two-sided p-value; `None` when the differences have zero spread.
    pub p: Option<f64>,
    pub ci95: (f64, f64),
    pub d_z: Option<f64>,
    pub n: usize,
    pub degenerate: bool,
}

/// Two-sided paired t-test with a paired t-interval on `n - 1` df.
pub fn paired_t(sample: &PairedSample) -> Result<StatsReport> {
    let n = sample.len();
    if n < 2 {
        return Err(invalid("paired t-test needs n >= 2"));
    }
    let d = sample.differences();
    let d_bar = mean(&d);
    let var = d.iter().map(|x| (x - d_bar).powi(2)).sum::<f64>() / (n - 1) as f64;
    let s_d = var.sqrt();
    let scale = (d.iter().map(|x| x.abs()).fold(0.0, f64::max)).max(1.0);
    if s_d <= 1e-12 * scale {
        return Ok(StatsReport {
            delta_mean: d_bar,
            t: None,
            p: None,
            ci95: (d_bar, d_bar),
            d_z: None,
            n,
            degenerate: true,
        });
    }
    let df = (n - 1) as f64;
    let se = s_d / (n as f64).sqrt();
    let t = d_bar / se;
    let half = student_t_quantile(0.975, df)? * se;
    Ok(StatsReport {
        delta_mean: d_bar,
        t: Some(t),
        p: Some(student_t_two_sided_p(t, df)?),
        ci95: (d_bar - half, d_bar + half),
        d_z: Some(d_bar / s_d),
        n,
        degenerate: false,
    })
}

/// `ln Gamma(x)` for `x > 0`, Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            return Ok(h);
        }
    }
    Err(Error::Numerical(format!("incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")))
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(invalid(format!("incomplete beta needs a, b > 0, got a={a}, b={b}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(invalid(format!("incomplete beta needs x in [0, 1], got {x}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

/// `P(T <= t)` for Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || t.is_nan() {
        return Err(invalid(format!("t CDF needs df > 0 and a number, got t={t}, df={df}")));
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t))?;
    Ok(if t >= 0.0 { 1.0 - tail } else { tail })
}

/// `P(|T| >= |t|)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || t.is_nan() {
        return Err(invalid(format!("t tail needs df > 0 and a number, got t={t}, df={df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    incomplete_beta(0.5 * df, 0.5, df / (df + t * t))
}

/// Inverse t CDF by bisection on the monotone CDF.
pub fn student_t_quantile(q: f64, df: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid(format!("t quantile needs q in (0, 1), got {q}")));
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while student_t_cdf(lo, df)? > q {
        lo *= 2.0;
    }
    while student_t_cdf(hi, df)? < q {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df)? < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_xy(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(invalid("x and y lengths differ"));
    }
    if x.len() < 2 {
        return Err(invalid("correlation needs n >= 2"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("correlation input contains a non-finite value"));
    }
    Ok(())
}

/// Pearson correlation; zero variance in either series is a degenerate error.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_xy(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for a zero-variance series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_xy(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Probability a positive outscores a negative, ties counted one half,
/// computed from the Mann-Whitney rank sum.
pub fn auc(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.is_empty() || scores_neg.is_empty() {
        return Err(invalid("AUC needs both groups nonempty"));
    }
    if scores_pos.iter().chain(scores_neg).any(|v| v.is_nan()) {
        return Err(invalid("AUC input contains NaN"));
    }
    let all: Vec<f64> = scores_pos.iter().chain(scores_neg).copied().collect();
    let ranks = average_ranks(&all);
    let (n_pos, n_neg) = (scores_pos.len() as f64, scores_neg.len() as f64);
    let rank_sum: f64 = ranks[..scores_pos.len()].iter().sum();
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// `(center_batch, mean error)` over windows of `window` batches every `stride`.
/// Batches are 1-based; the center of batches `s+1..=s+window` is `s + (window+1)/2`.
pub fn sliding_window(errors: &[f64], window: usize, stride: usize) -> Result<Vec<(f64, f64)>> {
    if window == 0 || stride == 0 {
        return Err(invalid("window and stride must be positive"));
    }
    if window > errors.len() {
        return Err(invalid(format!("window {window} exceeds trace length {}", errors.len())));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= errors.len() {
        let sum: f64 = errors[start..start + window].iter().sum();
        out.push((start as f64 + (window as f64 + 1.0) / 2.0, sum / window as f64));
        start += stride;
    }
    Ok(out)
}

pub const DEFAULT_WINDOW: usize = 400;
pub const DEFAULT_STRIDE: usize = 30;

pub fn sliding_window_error(trace: &RunTrace, window: usize, stride: usize) -> Result<Vec<(f64, f64)>> {
    sliding_window(&trace.errors(), window, stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

pub const DEFAULT_TIE_EPS: f64 = 0.02;

/// Win when `a` is lower than `b` by more than `tie_eps`; tie when `|a - b| <= tie_eps`.
pub fn win_tie_loss(sample: &PairedSample, tie_eps: f64) -> WinTieLoss {
    let mut out = WinTieLoss { wins: 0, ties: 0, losses: 0 };
    for d in sample.differences() {
        if d.abs() <= tie_eps {
            out.ties += 1;
        } else if d < 0.0 {
            out.wins += 1;
        } else {
            out.losses += 1;
        }
    }
    out
}

/// Exact sign test over paired differences; zeros are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignTest {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_zero: usize,
    /// `P(X >= n_pos)` for `X ~ Binomial(n_pos + n_neg, 1/2)`.
    pub p_upper: f64,
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_half_upper(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_n1 = ln_gamma(n as f64 + 1.0);
    let ln_half = n as f64 * std::f64::consts::LN_2;
    (k..=n)
        .map(|i| (ln_n1 - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0) - ln_half).exp())
        .sum::<f64>()
        .min(1.0)
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let n_pos = diffs.iter().filter(|d| **d > 0.0).count();
    let n_neg = diffs.iter().filter(|d| **d < 0.0).count();
    SignTest {
        n_pos,
        n_neg,
        n_zero: diffs.len() - n_pos - n_neg,
        p_upper: binomial_half_upper(n_pos, n_pos + n_neg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRun {
    pub mean_r_src: f64,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityReport {
    pub n: usize,
    /// Pearson of `(mean_r_src, 100 - err)`.
    pub pearson: f64,
    pub spearman: f64,
    /// `None` when every run falls on one side of the success threshold.
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub split: f64,
    /// Mean error of runs with `mean_r_src > split`.
    pub high_mean: Option<f64>,
    pub high_n: usize,
    /// Mean error of runs with `mean_r_src <= split`.
    pub low_mean: Option<f64>,
    pub low_n: usize,
}

/// Agreement between run-mean reliability and adaptation outcome.
/// Success is `err < success_threshold`.
pub fn reliability_validation(runs: &[ReliabilityRun], success_threshold: f64, split: f64) -> Result<ReliabilityReport> {
    if runs.len() < 2 {
        return Err(invalid("reliability validation needs at least 2 runs"));
    }
    let r: Vec<f64> = runs.iter().map(|x| x.mean_r_src).collect();
    let acc: Vec<f64> = runs.iter().map(|x| 100.0 - x.err).collect();
    let pos: Vec<f64> = runs.iter().filter(|x| x.err < success_threshold).map(|x| x.mean_r_src).collect();
    let neg: Vec<f64> = runs.iter().filter(|x| x.err >= success_threshold).map(|x| x.mean_r_src).collect();
    let auc_v = if pos.is_empty() || neg.is_empty() { None } else { Some(auc(&pos, &neg)?) };
    let high: Vec<f64> = runs.iter().filter(|x| x.mean_r_src > split).map(|x| x.err).collect();
    let low: Vec<f64> = runs.iter().filter(|x| x.mean_r_src <= split).map(|x| x.err).collect();
    Ok(ReliabilityReport {
        n: runs.len(),
        pearson: pearson(&r, &acc)?,
        spearman: spearman(&r, &acc)?,
        auc: auc_v,
        n_pos: pos.len(),
        n_neg: neg.len(),
        split,
        high_mean: (!high.is_empty()).then(|| mean(&high)),
        high_n: high.len(),
        low_mean: (!low.is_empty()).then(|| mean(&low)),
        low_n: low.len(),
    })
}

/// Paired samples of `method` against `baseline`, one per `(s_target, ordering)`
/// cell, aligned by seed. Cells are sorted by ordering, then descending `S`.
pub fn paired_cells(points: &[ErrorPoint], method: &str, baseline: &str) -> Result<Vec<((f64, String), PairedSample)>> {
    let mut cells: BTreeMap<(String, i64), (f64, Vec<(String, f64)>, Vec<(String, f64)>)> = BTreeMap::new();
    for p in points {
        let side = if p.method == method {
            0
        } else if p.method == baseline {
            1
        } else {
            continue;
        };
        let key = (p.ordering.clone(), -(p.s_target * 1e6).round() as i64);
        let entry = cells.entry(key).or_insert_with(|| (p.s_target, Vec::new(), Vec::new()));
        let label = format!("seed{}", p.seed);
        if side == 0 {
            entry.1.push((label, p.err));
        } else {
            entry.2.push((label, p.err));
        }
    }
    if cells.is_empty() {
        return Err(invalid(format!("no rows for `{method}` or `{baseline}`")));
    }
    cells
        .into_iter()
        .map(|((ordering, _), (s, a, b))| {
            let sample = PairedSample::align(&a, &b)
                .map_err(|e| invalid(format!("cell S = {s}, ordering `{ordering}`: {e}")))?;
            Ok(((s, ordering), sample))
        })
        .collect()
}

fn parse_err(e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize);
    let column = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.field().map(|f| format!("#{f}")),
        _ => None,
    };
    Error::Parse { row, column, msg: e.to_string() }
}

fn read_rows<T: serde::de::DeserializeOwned, R: Read>(input: R, required: &[&str]) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(parse_err)?.clone();
    for col in required {
        if !headers.iter().any(|h| h == *col) {
            return Err(Error::Parse {
                row: Some(1),
                column: Some(col.to_string()),
                msg: format!("missing required column; header is `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
    }
    rdr.deserialize().map(|r| r.map_err(parse_err)).collect()
}

/// Long-format error table: needs `method, ordering, s_target, seed, err`;
/// other columns are ignored and rows with an empty `s_target` are skipped,
/// so run summaries parse too.
pub fn read_error_points<R: Read>(input: R) -> Result<Vec<ErrorPoint>> {
    #[derive(Deserialize)]
    struct Row {
        method: String,
        ordering: String,
        s_target: Option<f64>,
        seed: u64,
        err: f64,
    }
    let rows: Vec<Row> = read_rows(input, &["method", "ordering", "s_target", "seed", "err"])?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let Some(s_target) = r.s_target else { continue };
        if !r.err.is_finite() || !s_target.is_finite() {
            return Err(Error::Parse {
                row: Some(i + 2),
                column: None,
                msg: "non-finite value".into(),
            });
        }
        out.push(ErrorPoint {
            method: r.method,
            ordering: r.ordering,
            s_target,
            seed: r.seed,
            err: r.err,
        });
    }
    Ok(out)
}

/// Needs `mean_r_src, err`.
pub fn read_reliability_runs<R: Read>(input: R) -> Result<Vec<ReliabilityRun>> {
    read_rows(input, &["mean_r_src", "err"])
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ScatterPoint {
    pub cell: String,
    pub split: u32,
    pub ungated_err: f64,
    pub gated_err: f64,
}

/// Needs `cell, split, ungated_err, gated_err`.
pub fn read_scatter<R: Read>(input: R) -> Result<Vec<ScatterPoint>> {
    read_rows(input, &["cell", "split", "ungated_err", "gated_err"])
}

/// Gated error as `a`, ungated as `b`.
pub fn scatter_sample(points: &[ScatterPoint]) -> Result<PairedSample> {
    PairedSample::new(
        points.iter().map(|p| format!("{}/{}", p.cell, p.split)).collect(),
        points.iter().map(|p| p.gated_err).collect(),
        points.iter().map(|p| p.ungated_err).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedPaired {
    pub s_target: f64,
    pub ordering: String,
    pub delta: f64,
    pub p: f64,
    pub significant: u8,
}

pub fn read_published_paired<R: Read>(input: R) -> Result<Vec<PublishedPaired>> {
    read_rows(input, &["s_target", "ordering", "delta", "p", "significant"])
}

/// Bundled fixtures of published values.
pub mod fixtures {
    use super::*;

    pub const MECHN_RESULTS: &str = include_str!("../../../fixtures/mechn_results.csv");
    pub const MECHN_PVALUES: &str = include_str!("../../../fixtures/mechn_pvalues.csv");
    pub const MECHN_RSRC: &str = include_str!("../../../fixtures/mechn_rsrc.csv");
    pub const RSRC_VALID: &str = include_str!("../../../fixtures/rsrc_valid.csv");
    pub const PERSPLIT_SCATTER: &str = include_str!("../../../fixtures/persplit_scatter.csv");

    pub const UNGATED: &str = "roid-asr";
    pub const GATED: &str = "rmemsafe-asr";

    pub fn mechn_results() -> Vec<ErrorPoint> {
        read_error_points(MECHN_RESULTS.as_bytes()).expect("bundled fixture parses")
    }

    pub fn mechn_pvalues() -> Vec<PublishedPaired> {
        read_published_paired(MECHN_PVALUES.as_bytes()).expect("bundled fixture parses")
    }

    /// `(s_target, ordering, mean_r_src)`.
    pub fn mechn_rsrc() -> Vec<(f64, String, f64)> {
        #[derive(Deserialize)]
        struct Row {
            s_target: f64,
            ordering: String,
            mean_r_src: f64,
        }
        read_rows::<Row, _>(MECHN_RSRC.as_bytes(), &["s_target", "ordering", "mean_r_src"])
            .expect("bundled fixture parses")
            .into_iter()
            .map(|r| (r.s_target, r.ordering, r.mean_r_src))
            .collect()
    }

    pub fn rsrc_valid() -> Vec<ReliabilityRun> {
        read_reliability_runs(RSRC_VALID.as_bytes()).expect("bundled fixture parses")
    }

    pub fn persplit_scatter() -> Vec<ScatterPoint> {
        read_scatter(PERSPLIT_SCATTER.as_bytes()).expect("bundled fixture parses")
    }
}
