//! Experiment orchestration: config resolution, source training and
//! degradation, the (method, seed, ordering, level) run grid, summaries and
//! sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{fmt_sig9, run, write_trace_csv, ControllerSpec, RunTrace};
use crate::config::{AdapterConfig, ControllerKind, Preset};
use crate::error::{Error, Result};
use crate::model::{encode_params, train_source, Architecture, Batch, ModelState, TrainConfig};
use crate::numerics::SeededRng;
use crate::streams::{degraded_source_suite, DegradedManifest, OrderingMode, StreamSpec, Task};

pub const SUMMARY_SCHEMA: &str = "relgate.summary.v1";
pub const SUMMARY_HEADER: [&str; 10] = [
    SUMMARY_SCHEMA,
    "method",
    "ordering",
    "s_target",
    "seed",
    "err",
    "mean_r_src",
    "resets",
    "batches",
    "status",
];
pub const SWEEP_SCHEMA: &str = "relgate.sweep.v1";
pub const CALIBRATION_SCHEMA: &str = "relgate.calibration.v1";

/// Method name that runs `adapter` verbatim with `custom_controller`.
pub const CUSTOM_METHOD: &str = "custom";

fn cfg_err(key: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

/// Parameters of the controllers the presets instantiate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSettings {
    pub periodic_interval: usize,
    pub window: usize,
    pub threshold: f64,
    pub tau_gate: f64,
    pub r_window: usize,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            periodic_interval: 1000,
            window: 100,
            threshold: 1.1,
            tau_gate: 0.4,
            r_window: 50,
        }
    }
}

impl ControllerSettings {
    pub fn spec_for(&self, kind: ControllerKind) -> ControllerSpec {
        let adaptive = ControllerSpec::Adaptive {
            window: self.window,
            threshold: self.threshold,
        };
        match kind {
            ControllerKind::None => ControllerSpec::None,
            ControllerKind::Periodic => ControllerSpec::Periodic {
                interval: self.periodic_interval,
            },
            ControllerKind::Adaptive => adaptive,
            ControllerKind::ReliabilityGated => ControllerSpec::ReliabilityGated {
                inner: Box::new(adaptive),
                tau_gate: self.tau_gate,
                r_window: self.r_window,
            },
        }
    }
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    STargets,
    TauGate,
    Lambda,
    Alpha,
    Beta,
    LambdaMarg,
    EtaMin,
    WMin,
    Eta,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 9] = [
        SweepAxis::STargets,
        SweepAxis::TauGate,
        SweepAxis::Lambda,
        SweepAxis::Alpha,
        SweepAxis::Beta,
        SweepAxis::LambdaMarg,
        SweepAxis::EtaMin,
        SweepAxis::WMin,
        SweepAxis::Eta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::STargets => "s_targets",
            SweepAxis::TauGate => "tau_gate",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::LambdaMarg => "lambda_marg",
            SweepAxis::EtaMin => "eta_min",
            SweepAxis::WMin => "w_min",
            SweepAxis::Eta => "eta",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| cfg_err("sweep.axis", format!("unknown axis `{name}`")))
    }

    fn apply(self, cfg: &mut ExperimentConfig, v: f64) {
        match self {
            SweepAxis::STargets => cfg.s_targets = vec![v],
            SweepAxis::TauGate => cfg.controller.tau_gate = v,
            SweepAxis::Lambda => cfg.adapter.lambda = v,
            SweepAxis::Alpha => cfg.adapter.alpha = v,
            SweepAxis::Beta => cfg.adapter.beta = v,
            SweepAxis::LambdaMarg => cfg.adapter.lambda_marg = v,
            SweepAxis::EtaMin => cfg.adapter.eta_min = v,
            SweepAxis::WMin => cfg.adapter.w_min = v,
            SweepAxis::Eta => cfg.adapter.eta = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Everything a run, calibration or sweep needs. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Preset names, or `custom`.
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub orderings: Vec<OrderingMode>,
    /// Target clean accuracies of degraded sources; empty runs the trained source.
    pub s_targets: Vec<f64>,
    pub calibration_tol: f64,
    pub train_samples: usize,
    pub clean_samples: usize,
    /// Stream description file, resolved relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream_path: Option<PathBuf>,
    pub stream: StreamSpec,
    pub architecture: Architecture,
    pub train: TrainConfig,
    /// Base hyperparameters the presets are applied on.
    pub adapter: AdapterConfig,
    pub controller: ControllerSettings,
    /// Controller of the `custom` method.
    pub custom_controller: ControllerSpec,
    /// Write one trace CSV per run.
    pub write_traces: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Preset::GatedFull.name().to_string()],
            seeds: vec![0],
            orderings: vec![OrderingMode::Iid],
            s_targets: Vec::new(),
            calibration_tol: 0.02,
            train_samples: 2000,
            clean_samples: 2000,
            stream_path: None,
            stream: StreamSpec::default(),
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            adapter: AdapterConfig::default(),
            controller: ControllerSettings::default(),
            custom_controller: ControllerSpec::None,
            write_traces: true,
            sweep: None,
        }
    }
}

/// A method resolved to its adapter config and controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub name: String,
    pub config: AdapterConfig,
    pub controller: ControllerSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        crate::config::parse_toml(text, "")
    }

    /// Reads a config file and inlines its `stream_path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(rel) = cfg.stream_path.take() {
            let full = path.parent().unwrap_or(Path::new(".")).join(&rel);
            let stream_text = fs::read_to_string(&full)
                .map_err(|e| cfg_err("stream_path", format!("cannot read {}: {e}", full.display())))?;
            cfg.stream = StreamSpec::from_toml(&stream_text)?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Fails fast on anything that would only surface mid-run; returns warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.methods.is_empty() {
            return Err(cfg_err("methods", "at least one method required"));
        }
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "at least one seed required"));
        }
        if self.orderings.is_empty() {
            return Err(cfg_err("orderings", "at least one ordering required"));
        }
        for (i, s) in self.s_targets.iter().enumerate() {
            if !(*s > 0.0 && *s < 1.0) {
                return Err(cfg_err(format!("s_targets[{i}]"), format!("must lie in (0, 1), got {s}")));
            }
        }
        if !(self.calibration_tol > 0.0 && self.calibration_tol < 0.5) {
            return Err(cfg_err("calibration_tol", "must lie in (0, 0.5)"));
        }
        if self.train_samples == 0 || self.clean_samples == 0 {
            return Err(cfg_err("train_samples", "sample counts must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, s) in self.seeds.iter().enumerate() {
            if !seen.insert(s) {
                return Err(cfg_err(format!("seeds[{i}]"), format!("duplicate seed {s}")));
            }
        }
        self.architecture.validate().map_err(|e| cfg_err("architecture", e.to_string()))?;
        if self.architecture.input_dim != self.stream.task.input_dim || self.architecture.classes != self.stream.task.classes {
            return Err(cfg_err("architecture", "input_dim and classes must match stream.task"));
        }
        if self.stream.batches == 0 || self.stream.batch_size == 0 {
            return Err(cfg_err("stream.batches", "stream needs at least one batch of one sample"));
        }
        let mut warnings = Vec::new();
        for (i, _) in self.methods.iter().enumerate() {
            let m = self.method(i)?;
            m.config
                .validate()
                .map_err(|e| match e {
                    Error::Config { key, msg } => cfg_err(format!("adapter.{key}"), format!("{msg} (method `{}`)", m.name)),
                    other => other,
                })?
                .into_iter()
                .filter(|w| m.name != Preset::SourceOnly.name() || !w.starts_with("eta = 0"))
                .for_each(|w| warnings.push(format!("method `{}`: {w}", m.name)));
            m.controller
                .validate()
                .map_err(|e| cfg_err(format!("methods[{i}].controller"), e.to_string()))?;
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(cfg_err("sweep.values", "sweep axis has no values"));
            }
        }
        Ok(warnings)
    }

    pub fn method(&self, index: usize) -> Result<Method> {
        let name = &self.methods[index];
        if name == CUSTOM_METHOD {
            return Ok(Method {
                name: name.clone(),
                config: self.adapter.clone(),
                controller: self.custom_controller.clone(),
            });
        }
        let preset = Preset::parse(name).map_err(|_| cfg_err(format!("methods[{index}]"), format!("unknown method `{name}`")))?;
        let mut config = preset.apply(&self.adapter);
        config.batch_size = self.stream.batch_size;
        Ok(Method {
            name: name.clone(),
            config,
            controller: self.controller.spec_for(preset.controller_kind()),
        })
    }

    /// Stream of one (seed, ordering) cell.
    pub fn stream_for(&self, seed: u64, ordering: OrderingMode) -> StreamSpec {
        let mut s = self.stream.clone();
        s.task.seed = s.task.seed.wrapping_add(seed);
        s.walk.seed = s.walk.seed.wrapping_add(seed);
        s.ordering.seed = s.ordering.seed.wrapping_add(seed);
        s.ordering.mode = ordering;
        s.sample_seed = s.sample_seed.wrapping_add(seed);
        s
    }
}

/// Seed of the weight noise used to degrade the source of `seed`.
pub fn noise_seed(seed: u64) -> u64 {
    SeededRng::new(seed).derive(0xde9).seed()
}

/// Trained source and held-out clean set of one seed.
#[derive(Debug, Clone)]
pub struct SeedSource {
    pub seed: u64,
    pub task: Task,
    pub source: ModelState,
    pub clean: Batch,
    pub clean_accuracy: f64,
}

pub fn train_seed_source(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSource> {
    let spec = cfg.stream_for(seed, OrderingMode::Iid);
    let task = Task::new(&spec.task)?;
    let root = SeededRng::new(seed);
    let mut train_rng = root.derive(0x7a1);
    let train = task.sample_uniform(cfg.train_samples, &mut train_rng)?;
    let params = train_source(&cfg.architecture, &train, &cfg.train, &mut train_rng)?;
    let clean = task.sample_uniform(cfg.clean_samples, &mut root.derive(0xc1ea))?;
    let source = ModelState::from_source(params);
    let clean_accuracy = crate::model::clean_accuracy(source.source(), &clean)?;
    Ok(SeedSource {
        seed,
        task,
        source,
        clean,
        clean_accuracy,
    })
}

/// Sources a run grid adapts from: the trained one, or one per degradation level.
#[derive(Debug, Clone)]
pub struct SourceLevel {
    pub s_target: Option<f64>,
    pub state: ModelState,
    pub manifest: Option<DegradedManifest>,
}

pub fn source_levels(cfg: &ExperimentConfig, src: &SeedSource) -> Result<Vec<SourceLevel>> {
    if cfg.s_targets.is_empty() {
        return Ok(vec![SourceLevel {
            s_target: None,
            state: src.source.clone(),
            manifest: None,
        }]);
    }
    let mut targets = cfg.s_targets.clone();
    targets.sort_by(|a, b| b.total_cmp(a));
    let suite = degraded_source_suite(&src.source, &targets, cfg.calibration_tol, &src.clean, noise_seed(src.seed))?;
    Ok(suite
        .into_iter()
        .map(|d| SourceLevel {
            s_target: Some(d.target),
            state: d.state,
            manifest: Some(d.manifest),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: String,
    pub ordering: String,
    pub s_target: Option<f64>,
    pub seed: u64,
    pub trace: RunTrace,
}

impl RunResult {
    fn key(&self) -> (String, String, i64, u64) {
        let s = self.s_target.map_or(i64::MIN, |s| -(s * 1e9).round() as i64);
        (self.method.clone(), self.ordering.clone(), s, self.seed)
    }

    /// File stem of this run's trace.
    pub fn stem(&self) -> String {
        let level = self.s_target.map_or("trained".to_string(), |s| format!("S{}", fmt_sig9(s)));
        format!("{}__{}__{}__seed{}", self.method, self.ordering, level, self.seed)
    }
}

/// Everything a run grid produced, sorted by (method, ordering, level, seed).
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub runs: Vec<RunResult>,
    /// `(seed, manifest)` for every degraded source used.
    pub manifests: Vec<(u64, DegradedManifest)>,
    pub warnings: Vec<String>,
}

impl GridOutcome {
    pub fn aborted(&self) -> Vec<&RunResult> {
        self.runs.iter().filter(|r| r.trace.aborted.is_some()).collect()
    }
}

/// Runs every (method, seed, ordering, level) cell. Aggregation does not
/// depend on execution order.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    let warnings = cfg.validate()?;
    let methods: Vec<Method> = (0..cfg.methods.len()).map(|i| cfg.method(i)).collect::<Result<_>>()?;
    let per_seed: Vec<(SeedSource, Vec<SourceLevel>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let src = train_seed_source(cfg, seed)?;
            let levels = source_levels(cfg, &src)?;
            Ok((src, levels))
        })
        .collect::<Result<_>>()?;
    let streams: BTreeMap<(u64, &'static str), Vec<Batch>> = cfg
        .seeds
        .par_iter()
        .flat_map(|&seed| cfg.orderings.par_iter().map(move |&o| (seed, o)))
        .map(|(seed, o)| {
            let spec = cfg.stream_for(seed, o);
            Ok(((seed, spec.ordering.name()), spec.generate()?))
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for m in &methods {
        for (src, levels) in &per_seed {
            for &o in &cfg.orderings {
                for level in levels {
                    jobs.push((m, src.seed, o, level));
                }
            }
        }
    }
    let mut runs: Vec<RunResult> = jobs
        .into_par_iter()
        .map(|(m, seed, o, level)| {
            let name = crate::streams::OrderingSpec { mode: o, ..Default::default() }.name();
            let stream = &streams[&(seed, name)];
            let trace = run(stream, level.state.clone(), &m.config, &m.controller)?;
            Ok(RunResult {
                method: m.name.clone(),
                ordering: name.to_string(),
                s_target: level.s_target,
                seed,
                trace,
            })
        })
        .collect::<Result<_>>()?;
    runs.sort_by_key(|r| r.key());
    let mut manifests: Vec<(u64, DegradedManifest)> = per_seed
        .iter()
        .flat_map(|(src, levels)| levels.iter().filter_map(|l| l.manifest.clone().map(|m| (src.seed, m))))
        .collect();
    manifests.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.target_s.total_cmp(&a.1.target_s)));
    Ok(GridOutcome {
        runs,
        manifests,
        warnings,
    })
}

pub fn write_summary<W: Write>(runs: &[RunResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for (i, r) in runs.iter().enumerate() {
        let status = if r.trace.aborted.is_some() { "aborted" } else { "ok" };
        let (err, r_src) = if r.trace.records.is_empty() {
            ("nan".to_string(), "nan".to_string())
        } else {
            (fmt_sig9(r.trace.mean_err()), fmt_sig9(r.trace.mean_r_src()))
        };
        w.write_record([
            (i + 1).to_string(),
            r.method.clone(),
            r.ordering.clone(),
            r.s_target.map(fmt_sig9).unwrap_or_default(),
            r.seed.to_string(),
            err,
            r_src,
            r.trace.resets().to_string(),
            r.trace.records.len().to_string(),
            status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One summary row as read back.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub ordering: String,
    pub s_target: Option<f64>,
    pub seed: u64,
    pub err: f64,
    pub mean_r_src: f64,
    pub resets: usize,
    pub batches: usize,
    pub status: String,
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != SUMMARY_HEADER {
        return Err(Error::Parse {
            row: Some(1),
            column: None,
            msg: format!("summary header must be `{}`", SUMMARY_HEADER.join(",")),
        });
    }
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Parse {
                row: e.position().map(|p| p.line() as usize),
                column: None,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Writes `summary.csv`, `effective_config.toml`, traces and degraded-source
/// manifests under `dir`.
pub fn write_grid(cfg: &ExperimentConfig, outcome: &GridOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("effective_config.toml"), cfg.to_toml())?;
    write_summary(&outcome.runs, fs::File::create(dir.join("summary.csv"))?)?;
    if cfg.write_traces {
        let traces = dir.join("traces");
        fs::create_dir_all(&traces)?;
        for r in &outcome.runs {
            write_trace_csv(&r.trace, fs::File::create(traces.join(format!("{}.csv", r.stem())))?)?;
        }
    }
    if !outcome.manifests.is_empty() {
        write_calibration_table(&outcome.manifests, fs::File::create(dir.join("calibration.csv"))?)?;
    }
    Ok(())
}

pub fn write_calibration_table<W: Write>(manifests: &[(u64, DegradedManifest)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([CALIBRATION_SCHEMA, "seed", "s_target", "s_actual", "epsilon", "iterations", "sha256"])?;
    for (i, (seed, m)) in manifests.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            seed.to_string(),
            fmt_sig9(m.target_s),
            fmt_sig9(m.achieved_s),
            fmt_sig9(m.epsilon),
            m.iterations.to_string(),
            m.sha256.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One calibrated degraded source of one seed.
#[derive(Debug, Clone)]
pub struct CalibratedSource {
    pub seed: u64,
    pub clean_accuracy: f64,
    pub manifest: DegradedManifest,
    pub blob: Vec<u8>,
}

/// Trains each seed's source and calibrates one degraded copy per target.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<Vec<CalibratedSource>> {
    cfg.validate()?;
    if cfg.s_targets.is_empty() {
        return Err(cfg_err("s_targets", "calibration needs at least one target"));
    }
    let per_seed: Vec<Vec<CalibratedSource>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let src = train_seed_source(cfg, seed)?;
            let levels = source_levels(cfg, &src)?;
            Ok(levels
                .into_iter()
                .map(|l| CalibratedSource {
                    seed,
                    clean_accuracy: src.clean_accuracy,
                    manifest: l.manifest.expect("degraded level has a manifest"),
                    blob: encode_params(l.state.source()),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn write_calibration(sources: &[CalibratedSource], dir: &Path) -> Result<()> {
    let sdir = dir.join("sources");
    fs::create_dir_all(&sdir)?;
    for s in sources {
        let stem = format!("seed{}_S{}", s.seed, fmt_sig9(s.manifest.target_s));
        fs::write(sdir.join(format!("{stem}.params")), &s.blob)?;
        fs::write(sdir.join(format!("{stem}.toml")), s.manifest.to_toml())?;
    }
    let manifests: Vec<(u64, DegradedManifest)> = sources.iter().map(|s| (s.seed, s.manifest.clone())).collect();
    write_calibration_table(&manifests, fs::File::create(dir.join("calibration.csv"))?)
}

/// Per-cell aggregate of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub method: String,
    pub ordering: String,
    pub s_target: Option<f64>,
    pub n: usize,
    pub err_mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub err_std: f64,
    pub mean_r_src: f64,
    pub resets_mean: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub runs: usize,
    pub aborted: usize,
}

pub fn aggregate(value: f64, runs: &[RunResult]) -> Vec<SweepRow> {
    let mut cells: BTreeMap<(String, String, i64), (Option<f64>, Vec<&RunResult>)> = BTreeMap::new();
    for r in runs {
        let (m, o, s, _) = r.key();
        cells.entry((m, o, s)).or_insert_with(|| (r.s_target, Vec::new())).1.push(r);
    }
    cells
        .into_iter()
        .map(|((method, ordering, _), (s_target, rs))| {
            let n = rs.len();
            let errs: Vec<f64> = rs.iter().map(|r| r.trace.mean_err()).collect();
            let mean = errs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SweepRow {
                value,
                method,
                ordering,
                s_target,
                n,
                err_mean: mean,
                err_std: std,
                mean_r_src: rs.iter().map(|r| r.trace.mean_r_src()).sum::<f64>() / n as f64,
                resets_mean: rs.iter().map(|r| r.trace.resets() as f64).sum::<f64>() / n as f64,
            }
        })
        .collect()
}

/// Runs the grid once per axis value.
pub fn sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepOutcome> {
    if spec.values.is_empty() {
        return Err(cfg_err("sweep.values", "sweep axis has no values"));
    }
    let mut rows = Vec::new();
    let (mut runs, mut aborted) = (0, 0);
    for &v in &spec.values {
        let mut c = cfg.clone();
        c.sweep = None;
        spec.axis.apply(&mut c, v);
        c.validate().map_err(|e| cfg_err(format!("sweep.values ({} = {v})", spec.axis.name()), e.to_string()))?;
        let out = run_grid(&c)?;
        runs += out.runs.len();
        aborted += out.aborted().len();
        rows.extend(aggregate(v, &out.runs));
    }
    Ok(SweepOutcome {
        axis: spec.axis,
        rows,
        runs,
        aborted,
    })
}

pub fn write_sweep<W: Write>(s: &SweepOutcome, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        SWEEP_SCHEMA,
        "axis",
        "value",
        "method",
        "ordering",
        "s_target",
        "n",
        "err_mean",
        "err_std",
        "mean_r_src",
        "resets_mean",
    ])?;
    for (i, r) in s.rows.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            s.axis.name().to_string(),
            fmt_sig9(r.value),
            r.method.clone(),
            r.ordering.clone(),
            r.s_target.map(fmt_sig9).unwrap_or_default(),
            r.n.to_string(),
            fmt_sig9(r.err_mean),
            fmt_sig9(r.err_std),
            fmt_sig9(r.mean_r_src),
            fmt_sig9(r.resets_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Output directory: explicit, else `./out`.
pub fn out_dir(explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"))
}
