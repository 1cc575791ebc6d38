//! Synthetic non-stationary streams, class orderings and source-degradation
//! calibration.
//!
//! Each class is a two-component Gaussian mixture whose components are a
//! prototype `p` and its coordinate reversal, so `flip_transform` preserves
//! the label by construction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::model::{clean_accuracy, encode_params, Batch, ModelState, ParameterSet};
use crate::numerics::{entropy_nats, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub classes: usize,
    /// Norm of each class prototype.
    pub prototype_scale: f64,
    /// Within-class isotropic standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            classes: 10,
            prototype_scale: 4.5,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// A task with its prototypes materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    /// One prototype per class, `classes x input_dim`.
    pub prototypes: Matrix,
}

impl Task {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        if spec.input_dim < 2 || spec.classes < 2 {
            return Err(invalid("task needs input_dim >= 2 and classes >= 2"));
        }
        if !(spec.noise.is_finite() && spec.noise >= 0.0 && spec.prototype_scale.is_finite() && spec.prototype_scale > 0.0) {
            return Err(invalid("task noise must be >= 0 and prototype_scale > 0"));
        }
        let mut rng = SeededRng::new(spec.seed).derive(0x7a5c);
        let d = spec.input_dim;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
        while rows.len() < spec.classes {
            let v = rng.gaussian_draw(d);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            let p: Vec<f64> = v.iter().map(|x| x * spec.prototype_scale / n).collect();
            let rev: Vec<f64> = p.iter().rev().copied().collect();
            let distinct = rows.iter().all(|q| {
                let r: Vec<f64> = q.iter().rev().copied().collect();
                dist(q, &p) > 1e-6 && dist(&r, &p) > 1e-6 && dist(q, &rev) > 1e-6
            });
            if distinct {
                rows.push(p);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            prototypes: Matrix::from_rows(&rows)?,
        })
    }

    /// Clean samples with the given labels.
    pub fn sample(&self, labels: &[usize], rng: &mut SeededRng) -> Result<Batch> {
        let d = self.spec.input_dim;
        let mut data = Vec::with_capacity(labels.len() * d);
        for &y in labels {
            if y >= self.spec.classes {
                return Err(invalid(format!("label {y} out of range")));
            }
            let proto = self.prototypes.row(y);
            let reversed = rng.bernoulli(0.5);
            for j in 0..d {
                let mean = if reversed { proto[d - 1 - j] } else { proto[j] };
                data.push(mean + self.spec.noise * rng.normal());
            }
        }
        Batch::new(Matrix::from_vec(labels.len(), d, data)?, labels.to_vec())
    }

    /// `n` clean samples with uniformly drawn labels.
    pub fn sample_uniform(&self, n: usize, rng: &mut SeededRng) -> Result<Batch> {
        let labels: Vec<usize> = (0..n).map(|_| rng.below(self.spec.classes)).collect();
        self.sample(&labels, rng)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// `x + s * noise_max * N(0, I)`.
    Noise,
    /// Per-feature gains `x_j * exp(s * scale_max * u_j)`, `u_j ~ N(0, 1)` fixed per walk.
    Scale,
    /// Rotation by `s * rotate_max` radians in each feature pair `(i, d-1-i)`.
    Rotate,
    /// `x + s * delta` for a fixed direction of norm `drift_max`.
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkSpec {
    /// Families visited in order; the walk cycles through them.
    pub families: Vec<Corruption>,
    pub severity_min: f64,
    pub severity_max: f64,
    /// Batches spent at each waypoint's full severity.
    pub hold: usize,
    /// Batches of linear cross-fade between consecutive waypoints.
    pub transition: usize,
    /// Distinct waypoints per cycle; families repeat when this exceeds their count.
    pub waypoints: usize,
    pub noise_max: f64,
    pub scale_max: f64,
    pub rotate_max: f64,
    pub drift_max: f64,
    pub seed: u64,
}

impl Default for WalkSpec {
    fn default() -> Self {
        Self {
            families: vec![Corruption::Noise, Corruption::Scale, Corruption::Rotate, Corruption::Drift],
            severity_min: 0.2,
            severity_max: 1.0,
            hold: 30,
            transition: 20,
            waypoints: 8,
            noise_max: 2.0,
            scale_max: 1.0,
            rotate_max: std::f64::consts::FRAC_PI_3,
            drift_max: 4.0,
            seed: 0,
        }
    }
}

/// Materialized walk: waypoint severities, drift direction and gain profile.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionWalk {
    pub spec: WalkSpec,
    pub waypoints: Vec<(Corruption, f64)>,
    pub drift: Vec<f64>,
    pub gains: Vec<f64>,
}

impl CorruptionWalk {
    pub fn new(spec: &WalkSpec, input_dim: usize) -> Result<Self> {
        if spec.families.is_empty() || spec.waypoints == 0 {
            return Err(invalid("walk needs at least one family and one waypoint"));
        }
        if !(0.0 <= spec.severity_min && spec.severity_min <= spec.severity_max && spec.severity_max.is_finite()) {
            return Err(invalid("need 0 <= severity_min <= severity_max"));
        }
        if spec.hold + spec.transition == 0 {
            return Err(invalid("walk segments must span at least one batch"));
        }
        let mut rng = SeededRng::new(spec.seed).derive(0x3a1c);
        let waypoints = (0..spec.waypoints)
            .map(|k| {
                let s = spec.severity_min + (spec.severity_max - spec.severity_min) * rng.uniform();
                (spec.families[k % spec.families.len()], s)
            })
            .collect();
        let v = rng.gaussian_draw(input_dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        Ok(Self {
            spec: spec.clone(),
            waypoints,
            drift: v.iter().map(|x| x * spec.drift_max / n).collect(),
            gains: rng.gaussian_draw(input_dim),
        })
    }

    /// Constant-severity walk on one family, for probes and tests.
    pub fn constant(family: Corruption, severity: f64, base: &WalkSpec, input_dim: usize) -> Result<Self> {
        let mut w = Self::new(base, input_dim)?;
        w.waypoints = vec![(family, severity)];
        Ok(w)
    }

    pub fn period(&self) -> usize {
        self.waypoints.len() * (self.spec.hold + self.spec.transition)
    }

    /// Active `(family, severity)` components at 0-based batch `t`.
    pub fn state_at(&self, t: usize) -> Vec<(Corruption, f64)> {
        let seg = self.spec.hold + self.spec.transition;
        let k = (t % self.period()) / seg;
        let offset = t % seg;
        let (fam, sev) = self.waypoints[k];
        if offset < self.spec.hold || self.waypoints.len() == 1 {
            return vec![(fam, sev)];
        }
        let (next_fam, next_sev) = self.waypoints[(k + 1) % self.waypoints.len()];
        let u = (offset - self.spec.hold + 1) as f64 / (self.spec.transition + 1) as f64;
        vec![(fam, sev * (1.0 - u)), (next_fam, next_sev * u)]
    }

    /// Largest per-batch change in any family's severity.
    pub fn step_bound(&self) -> f64 {
        let smax = self.waypoints.iter().map(|w| w.1).fold(0.0, f64::max);
        smax / (self.spec.transition + 1) as f64
    }

    pub fn apply(&self, x: &mut Matrix, components: &[(Corruption, f64)], rng: &mut SeededRng) {
        let d = x.cols();
        let mut ordered = components.to_vec();
        ordered.sort_by_key(|(f, _)| match f {
            Corruption::Rotate => 0,
            Corruption::Drift => 1,
            Corruption::Scale => 2,
            Corruption::Noise => 3,
        });
        for (fam, s) in ordered {
            match fam {
                Corruption::Rotate => {
                    let (sin, cos) = (s * self.spec.rotate_max).sin_cos();
                    for b in 0..x.rows() {
                        let row = x.row_mut(b);
                        for i in 0..d / 2 {
                            let (a, c) = (row[i], row[d - 1 - i]);
                            row[i] = cos * a - sin * c;
                            row[d - 1 - i] = sin * a + cos * c;
                        }
                    }
                }
                Corruption::Drift => {
                    for b in 0..x.rows() {
                        for (v, dv) in x.row_mut(b).iter_mut().zip(&self.drift) {
                            *v += s * dv;
                        }
                    }
                }
                Corruption::Scale => {
                    let g: Vec<f64> = self.gains.iter().map(|u| (s * self.spec.scale_max * u).exp()).collect();
                    for b in 0..x.rows() {
                        for (v, gj) in x.row_mut(b).iter_mut().zip(&g) {
                            *v *= gj;
                        }
                    }
                }
                Corruption::Noise => {
                    let sd = s * self.spec.noise_max;
                    for v in x.as_mut_slice() {
                        *v += sd * rng.normal();
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingMode {
    #[default]
    Iid,
    Correlated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrderingSpec {
    pub mode: OrderingMode,
    /// Dirichlet concentration of per-block class proportions.
    pub alpha: f64,
    /// Batches sharing one draw of class proportions.
    pub block: usize,
    pub seed: u64,
}

impl Default for OrderingSpec {
    fn default() -> Self {
        Self {
            mode: OrderingMode::Iid,
            alpha: 0.1,
            block: 1,
            seed: 0,
        }
    }
}

impl OrderingSpec {
    pub fn name(&self) -> &'static str {
        match self.mode {
            OrderingMode::Iid => "iid",
            OrderingMode::Correlated => "corr",
        }
    }
}

/// Generates `batches` batches of `batch_size` samples. Deterministic in the
/// task, walk and ordering seeds plus `rng`.
pub fn generate_stream(
    task: &Task,
    walk: &CorruptionWalk,
    ordering: &OrderingSpec,
    batches: usize,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Batch>> {
    if batches == 0 || batch_size == 0 {
        return Err(invalid("stream needs at least one batch of one sample"));
    }
    if ordering.block == 0 || !(ordering.alpha.is_finite() && ordering.alpha > 0.0) {
        return Err(invalid("ordering needs block >= 1 and alpha > 0"));
    }
    let c = task.spec.classes;
    let mut label_rng = SeededRng::new(ordering.seed).derive(0x0dd3);
    let mut out = Vec::with_capacity(batches);
    let mut props = vec![1.0 / c as f64; c];
    for t in 0..batches {
        let labels: Vec<usize> = match ordering.mode {
            OrderingMode::Iid => (0..batch_size).map(|_| label_rng.below(c)).collect(),
            OrderingMode::Correlated => {
                if t % ordering.block == 0 {
                    props = label_rng.dirichlet_symmetric(ordering.alpha, c);
                }
                (0..batch_size).map(|_| label_rng.categorical(&props)).collect()
            }
        };
        let mut batch = task.sample(&labels, rng)?;
        walk.apply(&mut batch.inputs, &walk.state_at(t), rng);
        out.push(batch);
    }
    Ok(out)
}

/// Stream description file: `[task]`, `[walk]`, `[ordering]` plus length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub task: TaskSpec,
    pub walk: WalkSpec,
    pub ordering: OrderingSpec,
    pub batches: usize,
    pub batch_size: usize,
    /// Seed of the per-sample noise draws.
    pub sample_seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            walk: WalkSpec::default(),
            ordering: OrderingSpec::default(),
            batches: 400,
            batch_size: 64,
            sample_seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        crate::config::parse_toml(text, "stream")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stream spec serializes")
    }

    pub fn generate(&self) -> Result<Vec<Batch>> {
        let task = Task::new(&self.task)?;
        let walk = CorruptionWalk::new(&self.walk, self.task.input_dim)?;
        let mut rng = SeededRng::new(self.sample_seed).derive(0x5a3e);
        generate_stream(&task, &walk, &self.ordering, self.batches, self.batch_size, &mut rng)
    }
}

/// Shannon entropy of a label histogram, nats.
pub fn label_entropy(labels: &[usize], classes: usize) -> f64 {
    let mut h = vec![0.0; classes];
    for &y in labels {
        h[y] += 1.0;
    }
    let n = labels.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    entropy_nats(&h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub epsilon: f64,
    pub achieved: f64,
    pub iterations: usize,
    /// `(eps_lo, acc_lo, eps_hi, acc_hi)` after every bisection step.
    pub brackets: Vec<(f64, f64, f64, f64)>,
}

const MAX_CALIBRATION_ITERS: usize = 40;

/// Clean accuracy of `source` perturbed at `eps` with a fixed noise seed.
pub fn degraded_accuracy(source: &ParameterSet, eps: f64, clean: &Batch, noise_seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(noise_seed);
    clean_accuracy(&source.perturbed(eps, &mut rng), clean)
}

/// Bisection for the weight-noise scale whose single noise realization
/// (seeded by `noise_seed` at every probe) lands the clean accuracy within
/// `tol` of `target`.
pub fn calibrate_epsilon(source: &ModelState, target: f64, tol: f64, clean: &Batch, noise_seed: u64) -> Result<Calibration> {
    if !(0.0..=1.0).contains(&target) || !(tol > 0.0) {
        return Err(invalid("target must lie in [0, 1] and tol > 0"));
    }
    let src = source.source();
    let acc = |eps: f64| degraded_accuracy(src, eps, clean, noise_seed);
    let acc0 = acc(0.0)?;
    if (acc0 - target).abs() <= tol {
        return Ok(Calibration {
            epsilon: 0.0,
            achieved: acc0,
            iterations: 0,
            brackets: vec![],
        });
    }
    if acc0 < target {
        return Err(invalid(format!("target {target} exceeds clean accuracy {acc0}")));
    }
    let fail = |lo: f64, hi: f64, acc_lo: f64, acc_hi: f64, iterations: usize| Error::Calibration {
        target,
        tol,
        iterations,
        eps_lo: lo,
        eps_hi: hi,
        acc_lo,
        acc_hi,
    };
    let (mut lo, mut acc_lo) = (0.0, acc0);
    let (mut hi, mut acc_hi) = (1.0, acc(1.0)?);
    let mut doublings = 0;
    while acc_hi >= target - tol {
        if (acc_hi - target).abs() <= tol {
            return Ok(Calibration {
                epsilon: hi,
                achieved: acc_hi,
                iterations: 0,
                brackets: vec![],
            });
        }
        lo = hi;
        acc_lo = acc_hi;
        hi *= 2.0;
        acc_hi = acc(hi)?;
        doublings += 1;
        if doublings > 60 {
            return Err(fail(lo, hi, acc_lo, acc_hi, 0));
        }
    }
    let mut brackets = vec![(lo, acc_lo, hi, acc_hi)];
    for it in 1..=MAX_CALIBRATION_ITERS {
        let mid = 0.5 * (lo + hi);
        let a = acc(mid)?;
        if (a - target).abs() <= tol {
            return Ok(Calibration {
                epsilon: mid,
                achieved: a,
                iterations: it,
                brackets,
            });
        }
        if a > target {
            lo = mid;
            acc_lo = a;
        } else {
            hi = mid;
            acc_hi = a;
        }
        brackets.push((lo, acc_lo, hi, acc_hi));
    }
    Err(fail(lo, hi, acc_lo, acc_hi, MAX_CALIBRATION_ITERS))
}

/// Text record stored next to each degraded parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradedManifest {
    pub target_s: f64,
    pub achieved_s: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub seed: u64,
    pub sha256: String,
}

impl DegradedManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("degraded manifest: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct DegradedSource {
    pub target: f64,
    pub calibration: Calibration,
    pub state: ModelState,
    pub manifest: DegradedManifest,
}

/// One calibrated degraded source per target (targets in descending order).
pub fn degraded_source_suite(
    source: &ModelState,
    targets: &[f64],
    tol: f64,
    clean: &Batch,
    noise_seed: u64,
) -> Result<Vec<DegradedSource>> {
    if targets.windows(2).any(|w| w[0] < w[1]) {
        return Err(invalid("degradation targets must be sorted descending"));
    }
    targets
        .iter()
        .map(|&target| {
            let cal = calibrate_epsilon(source, target, tol, clean, noise_seed)?;
            let mut rng = SeededRng::new(noise_seed);
            let params = source.source().perturbed(cal.epsilon, &mut rng);
            let digest = {
                use sha2::{Digest, Sha256};
                hex::encode(Sha256::digest(encode_params(&params)))
            };
            Ok(DegradedSource {
                target,
                manifest: DegradedManifest {
                    target_s: target,
                    achieved_s: cal.achieved,
                    epsilon: cal.epsilon,
                    iterations: cal.iterations,
                    seed: noise_seed,
                    sha256: digest,
                },
                calibration: cal,
                state: ModelState::from_source(params),
            })
        })
        .collect()
}
