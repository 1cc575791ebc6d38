//! The per-batch adaptation loop, decoupled flip inference, prior
//! correction, reset controllers and the run trace.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::AdapterConfig;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::model::{flip_transform, Batch, ModelState};
use crate::numerics::{argmax, normalized_entropy_raw, softmax_raw, Posterior};
use crate::objective::{effective_lr, total_loss, LossBreakdown, PriorState};

/// Declarative controller description, as written in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ControllerSpec {
    #[default]
    None,
    /// Fires on every batch index divisible by `interval` (1-based).
    Periodic {
        #[serde(default = "default_interval")]
        interval: usize,
    },
    /// Fires when the mean expert entropy over the last `window` batches
    /// exceeds `threshold` times its run-to-date median; then stays quiet for
    /// one window.
    Adaptive {
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    /// Delegates to `inner`, vetoing when the mean `r_src` over the last
    /// `r_window` batches is below `tau_gate`.
    ReliabilityGated {
        inner: Box<ControllerSpec>,
        tau_gate: f64,
        #[serde(default = "default_r_window")]
        r_window: usize,
    },
}

fn default_interval() -> usize {
    1000
}
fn default_window() -> usize {
    100
}
fn default_threshold() -> f64 {
    1.1
}
fn default_r_window() -> usize {
    50
}

impl ControllerSpec {
    pub fn periodic(interval: usize) -> Self {
        ControllerSpec::Periodic { interval }
    }

    pub fn adaptive() -> Self {
        ControllerSpec::Adaptive {
            window: default_window(),
            threshold: default_threshold(),
        }
    }

    pub fn gated(inner: ControllerSpec, tau_gate: f64) -> Self {
        ControllerSpec::ReliabilityGated {
            inner: Box::new(inner),
            tau_gate,
            r_window: default_r_window(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Error::Config {
            key: "controller".into(),
            msg: msg.into(),
        };
        match self {
            ControllerSpec::None => Ok(()),
            ControllerSpec::Periodic { interval } if *interval == 0 => Err(bad("interval must be positive")),
            ControllerSpec::Periodic { .. } => Ok(()),
            ControllerSpec::Adaptive { window, threshold } => {
                if *window == 0 {
                    Err(bad("window must be positive"))
                } else if !threshold.is_finite() || *threshold <= 0.0 {
                    Err(bad("threshold must be positive"))
                } else {
                    Ok(())
                }
            }
            ControllerSpec::ReliabilityGated {
                inner,
                tau_gate,
                r_window,
            } => {
                if *r_window == 0 {
                    return Err(bad("r_window must be positive"));
                }
                if !(0.0..=1.0).contains(tau_gate) {
                    return Err(bad("tau_gate must lie in [0, 1]"));
                }
                if matches!(**inner, ControllerSpec::ReliabilityGated { .. }) {
                    return Err(bad("gated controllers do not nest"));
                }
                inner.validate()
            }
        }
    }
}

/// What the controller sees after each update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// 1-based index of the batch just processed.
    pub batch_index: usize,
    pub h_exp: f64,
    pub r_src: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetDecision {
    NoReset,
    Reset,
}

#[derive(Debug, Clone)]
pub struct ResetController {
    spec: ControllerSpec,
    h_history: Vec<f64>,
    h_sorted: Vec<f64>,
    r_history: Vec<f64>,
    quiet_until: usize,
    last_index: usize,
    pub fires: usize,
    pub inner_fires: usize,
    pub vetoes: usize,
}

fn tail_mean(v: &[f64], w: usize) -> f64 {
    let tail = &v[v.len().saturating_sub(w)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn sorted_median(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ResetController {
    pub fn new(spec: ControllerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            h_history: Vec::new(),
            h_sorted: Vec::new(),
            r_history: Vec::new(),
            quiet_until: 0,
            last_index: 0,
            fires: 0,
            inner_fires: 0,
            vetoes: 0,
        })
    }

    pub fn spec(&self) -> &ControllerSpec {
        &self.spec
    }

    /// Feeds one batch and decides whether to reset now.
    pub fn observe(&mut self, obs: Observation) -> Result<ResetDecision> {
        if obs.batch_index != self.last_index + 1 {
            return Err(invalid(format!(
                "controller expected batch {}, got {}",
                self.last_index + 1,
                obs.batch_index
            )));
        }
        self.last_index = obs.batch_index;
        self.h_history.push(obs.h_exp);
        let pos = self.h_sorted.partition_point(|v| *v < obs.h_exp);
        self.h_sorted.insert(pos, obs.h_exp);
        self.r_history.push(obs.r_src);

        let spec = self.spec.clone();
        let (fire, inner_fire) = match &spec {
            ControllerSpec::ReliabilityGated {
                inner,
                tau_gate,
                r_window,
            } => {
                let inner_fire = self.inner_decides(inner, obs.batch_index);
                let r_bar = tail_mean(&self.r_history, *r_window);
                if inner_fire && r_bar < *tau_gate {
                    self.vetoes += 1;
                }
                (inner_fire && r_bar >= *tau_gate, inner_fire)
            }
            other => {
                let f = self.inner_decides(other, obs.batch_index);
                (f, f)
            }
        };
        if inner_fire {
            self.inner_fires += 1;
        }
        if fire {
            self.fires += 1;
            Ok(ResetDecision::Reset)
        } else {
            Ok(ResetDecision::NoReset)
        }
    }

    fn inner_decides(&mut self, spec: &ControllerSpec, t: usize) -> bool {
        match spec {
            ControllerSpec::None | ControllerSpec::ReliabilityGated { .. } => false,
            ControllerSpec::Periodic { interval } => t.is_multiple_of(*interval),
            ControllerSpec::Adaptive { window, threshold } => {
                if self.h_history.len() < *window || t < self.quiet_until {
                    return false;
                }
                let fire = tail_mean(&self.h_history, *window) > threshold * sorted_median(&self.h_sorted);
                if fire {
                    self.quiet_until = t + window;
                }
                fire
            }
        }
    }
}

/// Standalone decision for a controller over an observation history; the
/// last element is the current batch.
pub fn controller_check(spec: &ControllerSpec, history: &[Observation]) -> Result<ResetDecision> {
    let mut c = ResetController::new(spec.clone())?;
    let mut last = ResetDecision::NoReset;
    for obs in history {
        last = c.observe(*obs)?;
    }
    Ok(last)
}

/// `gamma_i = gamma_min + (gamma_max - gamma_min) * Hnorm(z_orig,i)`.
pub fn flip_gammas(logits: &Matrix, gamma_min: f64, gamma_max: f64) -> Vec<f64> {
    logits
        .iter_rows()
        .map(|z| gamma_min + (gamma_max - gamma_min) * normalized_entropy_raw(&softmax_raw(z)))
        .collect()
}

/// Confidence-weighted blend of original and flipped-view logits.
pub fn predict_decoupled(state: &ModelState, inputs: &Matrix, gamma_min: f64, gamma_max: f64) -> Result<Vec<Posterior>> {
    let z = state.params().logits(inputs)?;
    let z_flip = state.params().logits(&flip_transform(inputs))?;
    Ok(blend_logits(&z, &z_flip, gamma_min, gamma_max))
}

pub(crate) fn blend_logits(z: &Matrix, z_flip: &Matrix, gamma_min: f64, gamma_max: f64) -> Vec<Posterior> {
    let gammas = flip_gammas(z, gamma_min, gamma_max);
    z.iter_rows()
        .zip(z_flip.iter_rows())
        .zip(gammas)
        .map(|((a, b), g)| {
            let mix: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - g) * x + g * y).collect();
            Posterior::from_trusted(softmax_raw(&mix))
        })
        .collect()
}

/// `p'_c ∝ p_c / (prior_c + 1e-8)` when enabled; identity otherwise.
pub fn prior_correction(pred: Vec<Posterior>, prior: &PriorState, enabled: bool) -> Vec<Posterior> {
    if !enabled {
        return pred;
    }
    pred.into_iter()
        .map(|p| {
            let mut v: Vec<f64> = p
                .probs()
                .iter()
                .zip(prior.p_prior.probs())
                .map(|(pc, pr)| pc / (pr + 1e-8))
                .collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            Posterior::from_trusted(v)
        })
        .collect()
}

/// One row of the run trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub batch: usize,
    /// Top-1 error of the final prediction, percent.
    pub err: f64,
    pub h_src: f64,
    pub r_src: f64,
    pub gated_js: f64,
    pub lambda_eff: f64,
    pub eta_eff: f64,
    pub l_slr: f64,
    pub l_cons: f64,
    pub l_marg: f64,
    pub l_anch: f64,
    pub total: f64,
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    /// Diagnostic if the run stopped early on a numerical failure.
    pub aborted: Option<String>,
}

impl RunTrace {
    pub fn mean_err(&self) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        self.records.iter().map(|r| r.err).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_r_src(&self) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        self.records.iter().map(|r| r.r_src).sum::<f64>() / self.records.len() as f64
    }

    pub fn resets(&self) -> usize {
        self.records.iter().filter(|r| r.reset).count()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.err).collect()
    }
}

/// Everything that evolves across batches.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub state: ModelState,
    pub prior: PriorState,
    pub controller: ResetController,
    pub config: AdapterConfig,
    velocity: Vec<f64>,
    batch_index: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub prediction: Vec<Posterior>,
    pub record: TraceRecord,
    pub breakdown: LossBreakdown,
    pub gammas: Vec<f64>,
}

impl Adapter {
    pub fn new(state: ModelState, config: AdapterConfig, controller: ControllerSpec) -> Result<Self> {
        config.validate()?;
        let classes = state.arch().classes;
        let n = state.arch().adaptable_count();
        Ok(Self {
            prior: PriorState::uniform(classes, config.rho),
            controller: ResetController::new(controller)?,
            velocity: vec![0.0; n],
            batch_index: 0,
            state,
            config,
        })
    }

    pub fn batch_index(&self) -> usize {
        self.batch_index
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// One update in the fixed order: forward, signals, losses, prior update,
    /// anchor, gradient, momentum step at `eta_eff`, controller, decoupled
    /// prediction with the updated parameters, optional prior correction.
    /// Labels only feed the `err` field.
    pub fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let cfg = &self.config;
        let obj = total_loss(&batch.inputs, &self.state, &self.prior, cfg)?;
        let s = &obj.signals;
        let eta_eff = effective_lr(cfg.eta, cfg.eta_min, s.h_exp);

        if eta_eff > 0.0 {
            let mut theta = self.state.params().affine_flat();
            for ((t, v), g) in theta.iter_mut().zip(self.velocity.iter_mut()).zip(&obj.grad) {
                *v = cfg.momentum * *v + g;
                *t -= eta_eff * *v;
            }
            if theta.iter().any(|t| !t.is_finite()) {
                return Err(Error::Numerical(format!("non-finite parameters after batch {}", self.batch_index + 1)));
            }
            self.state.params.set_affine_flat(&theta)?;
        }
        self.prior = obj.prior.clone();
        self.batch_index += 1;

        let decision = self.controller.observe(Observation {
            batch_index: self.batch_index,
            h_exp: s.h_exp,
            r_src: s.r_src,
        })?;
        let reset = decision == ResetDecision::Reset;
        if reset {
            self.state.reset_to_source(cfg.reset_scope);
            self.velocity.iter_mut().for_each(|v| *v = 0.0);
        }

        let z = self.state.params().logits(&batch.inputs)?;
        let z_flip = self.state.params().logits(&flip_transform(&batch.inputs))?;
        let gammas = flip_gammas(&z, cfg.gamma_min, cfg.gamma_max);
        let pred = blend_logits(&z, &z_flip, cfg.gamma_min, cfg.gamma_max);
        let pred = prior_correction(pred, &self.prior, cfg.prior_correction);
        let wrong = pred
            .iter()
            .zip(&batch.eval_labels)
            .filter(|(p, y)| argmax(p.probs()) != **y)
            .count();

        let b = &obj.breakdown;
        let record = TraceRecord {
            batch: self.batch_index,
            err: 100.0 * wrong as f64 / batch.len() as f64,
            h_src: s.h_src,
            r_src: s.r_src,
            gated_js: s.r_src * s.d_js,
            lambda_eff: obj.lambda_eff,
            eta_eff,
            l_slr: b.l_slr,
            l_cons: b.l_cons,
            l_marg: b.l_marg,
            l_anch: b.l_anch,
            total: b.total,
            reset,
        };
        Ok(StepOutput {
            prediction: pred,
            record,
            breakdown: obj.breakdown,
            gammas,
        })
    }

    /// Folds `step` over a stream; stops at the first numerical failure and
    /// keeps the records produced so far.
    pub fn run<'a>(&mut self, stream: impl IntoIterator<Item = &'a Batch>) -> RunTrace {
        let mut trace = RunTrace::default();
        for batch in stream {
            match self.step(batch) {
                Ok(out) => trace.records.push(out.record),
                Err(e) => {
                    trace.aborted = Some(format!("batch {}: {e}", self.batch_index + 1));
                    break;
                }
            }
        }
        trace
    }
}

/// Convenience wrapper: fresh adapter over `state`, then `run`.
pub fn run<'a>(
    stream: impl IntoIterator<Item = &'a Batch>,
    state: ModelState,
    config: &AdapterConfig,
    controller: &ControllerSpec,
) -> Result<RunTrace> {
    let mut a = Adapter::new(state, config.clone(), controller.clone())?;
    Ok(a.run(stream))
}

pub const TRACE_HEADER: [&str; 13] = [
    "batch",
    "err",
    "h_src",
    "r_src",
    "gated_js",
    "lambda_eff",
    "eta_eff",
    "l_slr",
    "l_cons",
    "l_marg",
    "l_anch",
    "total",
    "reset",
];

/// Formats like C's `%.9g`.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.8e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-4..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, v);
        trim_zeros(&fixed).to_string()
    } else {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_trace_csv<W: Write>(trace: &RunTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in &trace.records {
        let mut row = vec![r.batch.to_string()];
        row.extend(
            [
                r.err,
                r.h_src,
                r.r_src,
                r.gated_js,
                r.lambda_eff,
                r.eta_eff,
                r.l_slr,
                r.l_cons,
                r.l_marg,
                r.l_anch,
                r.total,
            ]
            .iter()
            .map(|v| fmt_sig9(*v)),
        );
        row.push(u8::from(r.reset).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        row: Some(row),
        column: Some(TRACE_HEADER[idx].into()),
        msg: "missing field".into(),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        row: Some(row),
        column: Some(TRACE_HEADER[idx].into()),
        msg: format!("cannot parse `{raw}`"),
    })
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<RunTrace> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(Error::Parse {
            row: Some(0),
            column: None,
            msg: format!("trace header must be `{}`", TRACE_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let f = |k: usize| parse_field::<f64>(&rec, k, row);
        let reset = match rec.get(12).map(str::trim) {
            Some("0") => false,
            Some("1") => true,
            other => {
                return Err(Error::Parse {
                    row: Some(row),
                    column: Some("reset".into()),
                    msg: format!("expected 0 or 1, got {other:?}"),
                })
            }
        };
        let batch: usize = parse_field(&rec, 0, row)?;
        if batch != records.len() + 1 {
            return Err(Error::Parse {
                row: Some(row),
                column: Some("batch".into()),
                msg: format!("expected batch {}, got {batch}", records.len() + 1),
            });
        }
        records.push(TraceRecord {
            batch,
            err: f(1)?,
            h_src: f(2)?,
            r_src: f(3)?,
            gated_js: f(4)?,
            lambda_eff: f(5)?,
            eta_eff: f(6)?,
            l_slr: f(7)?,
            l_cons: f(8)?,
            l_marg: f(9)?,
            l_anch: f(10)?,
            total: f(11)?,
            reset,
        });
    }
    Ok(RunTrace { records, aborted: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::gate::GateMode;
    use crate::model::{Architecture, ParameterSet};
    use crate::numerics::SeededRng;
    use approx::assert_abs_diff_eq;

    fn toy(seed: u64) -> (ModelState, Vec<Batch>) {
        let arch = Architecture {
            input_dim: 6,
            hidden: vec![8],
            classes: 3,
        };
        let mut rng = SeededRng::new(seed);
        let src = ParameterSet::random(&arch, &mut rng).unwrap();
        let batches = (0..12)
            .map(|_| {
                let x = Matrix::from_vec(16, 6, rng.gaussian_draw(96)).unwrap();
                let y = (0..16).map(|_| rng.below(3)).collect();
                Batch::new(x, y).unwrap()
            })
            .collect();
        (ModelState::from_source(src), batches)
    }

    fn obs(t: usize, h: f64, r: f64) -> Observation {
        Observation {
            batch_index: t,
            h_exp: h,
            r_src: r,
        }
    }

    #[test]
    fn periodic_fires_on_multiples() {
        let mut c = ResetController::new(ControllerSpec::periodic(1000)).unwrap();
        for t in 1..=2500 {
            let d = c.observe(obs(t, 0.5, 0.5)).unwrap();
            assert_eq!(d == ResetDecision::Reset, t == 1000 || t == 2000, "t={t}");
        }
        assert_eq!(c.fires, 2);
    }

    #[test]
    fn gated_wrapper_vetoes_below_tau() {
        let spec = ControllerSpec::gated(ControllerSpec::periodic(1), 0.40);
        let hist: Vec<_> = (1..=5).map(|t| obs(t, 0.5, 0.26)).collect();
        assert_eq!(controller_check(&spec, &hist).unwrap(), ResetDecision::NoReset);
        let hist: Vec<_> = (1..=5).map(|t| obs(t, 0.5, 0.81)).collect();
        assert_eq!(controller_check(&spec, &hist).unwrap(), ResetDecision::Reset);
    }

    #[test]
    fn adaptive_fires_on_entropy_rise_then_cools_down() {
        let mut c = ResetController::new(ControllerSpec::adaptive()).unwrap();
        let mut fired = Vec::new();
        for t in 1..=400 {
            let h = if t <= 200 { 0.3 } else { 0.6 };
            if c.observe(obs(t, h, 1.0)).unwrap() == ResetDecision::Reset {
                fired.push(t);
            }
        }
        assert!(!fired.is_empty());
        assert!(fired[0] > 200);
        for w in fired.windows(2) {
            assert!(w[1] - w[0] >= 100);
        }
    }

    #[test]
    fn controller_rejects_out_of_order_batches() {
        let mut c = ResetController::new(ControllerSpec::None).unwrap();
        assert!(c.observe(obs(2, 0.0, 0.0)).is_err());
        assert!(ResetController::new(ControllerSpec::periodic(0)).is_err());
    }

    #[test]
    fn decoupled_prediction_examples() {
        let z = Matrix::from_rows(&[vec![800.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let zf = Matrix::from_rows(&[vec![0.0, 5.0, 0.0], vec![2.0, -2.0, 0.0]]).unwrap();
        let g = flip_gammas(&z, 0.0, 0.5);
        assert_eq!(g[0], 0.0);
        assert_abs_diff_eq!(g[1], 0.5, epsilon = 1e-12);
        let p = blend_logits(&z, &zf, 0.0, 0.5);
        assert_eq!(p[0].probs(), softmax_raw(z.row(0)).as_slice());
        let avg = softmax_raw(&[1.0, -1.0, 0.0]);
        for (a, b) in p[1].probs().iter().zip(&avg) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let same = blend_logits(&zf, &zf, 0.0, 1.0);
        for (row, p) in zf.iter_rows().zip(&same) {
            for (a, b) in p.probs().iter().zip(softmax_raw(row)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn prior_correction_examples() {
        let pred = vec![Posterior::new(vec![0.5, 0.3, 0.2]).unwrap()];
        let uni = PriorState::uniform(3, 0.01);
        assert_eq!(prior_correction(pred.clone(), &uni, false), pred);
        for (a, b) in prior_correction(pred.clone(), &uni, true)[0].probs().iter().zip(pred[0].probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let skew = PriorState {
            p_prior: Posterior::new(vec![0.8, 0.1, 0.1]).unwrap(),
            rho: 0.01,
        };
        assert!(prior_correction(pred.clone(), &skew, true)[0].probs()[0] < 0.5);
    }

    #[test]
    fn zero_eta_leaves_parameters_and_matches_source() {
        let (state, batches) = toy(1);
        let cfg = Preset::SourceOnly.apply(&AdapterConfig {
            batch_size: 16,
            ..AdapterConfig::default()
        });
        let mut a = Adapter::new(state.clone(), cfg, ControllerSpec::None).unwrap();
        let trace = a.run(&batches);
        assert_eq!(a.state.params(), state.source());
        for (rec, b) in trace.records.iter().zip(&batches) {
            let z = state.source().logits(&b.inputs).unwrap();
            let wrong = z
                .iter_rows()
                .zip(&b.eval_labels)
                .filter(|(r, y)| argmax(r) != **y)
                .count();
            assert_eq!(rec.err, 100.0 * wrong as f64 / 16.0);
        }
    }

    #[test]
    fn runs_are_deterministic_and_complete() {
        let (state, batches) = toy(2);
        let cfg = AdapterConfig {
            eta: 0.05,
            ..AdapterConfig::default()
        };
        let spec = ControllerSpec::periodic(5);
        let a = run(&batches, state.clone(), &cfg, &spec).unwrap();
        let b = run(&batches, state, &cfg, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), batches.len());
        assert_eq!(a.resets(), 2);
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_trace_csv(&a, &mut x).unwrap();
        write_trace_csv(&b, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn reset_restores_source_bit_exactly_and_zeroes_momentum() {
        let (state, batches) = toy(3);
        let cfg = AdapterConfig {
            eta: 0.1,
            gate: GateMode::Forced(1.0),
            ..AdapterConfig::default()
        };
        let mut a = Adapter::new(state, cfg, ControllerSpec::periodic(4)).unwrap();
        for b in &batches {
            let out = a.step(b).unwrap();
            if out.record.reset {
                assert_eq!(a.state.params().affine_flat(), a.state.source().affine_flat());
                assert!(a.velocity().iter().all(|v| *v == 0.0));
            } else {
                assert_ne!(a.state.params().affine_flat(), a.state.source().affine_flat());
            }
            assert!(out.gammas.iter().all(|g| (0.0..=0.5).contains(g)));
        }
    }

    #[test]
    fn trace_csv_round_trips() {
        let (state, batches) = toy(4);
        let cfg = AdapterConfig {
            eta: 0.05,
            ..AdapterConfig::default()
        };
        let t = run(&batches, state, &cfg, &ControllerSpec::periodic(3)).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("batch,err,h_src,r_src,gated_js,lambda_eff,eta_eff,l_slr,l_cons,l_marg,l_anch,total,reset\n"));
        let back = read_trace_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records.len(), t.records.len());
        for (a, b) in back.records.iter().zip(&t.records) {
            assert_eq!(a.reset, b.reset);
            assert!((a.total - b.total).abs() <= 1e-8 * b.total.abs().max(1e-300));
        }
        assert!(read_trace_csv("batch,err\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn sig9_matches_printf() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(0.1), "0.1");
        assert_eq!(fmt_sig9(12.5), "12.5");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456789.0), "123456789");
        assert_eq!(fmt_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_sig9(2.5e-4), "0.00025");
        assert_eq!(fmt_sig9(1.5e-5), "1.5e-05");
        assert_eq!(fmt_sig9(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_sig9(9.999999999), "10");
    }
}
