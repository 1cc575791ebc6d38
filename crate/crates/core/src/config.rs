//! Adaptation hyperparameters and the named method presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{EntropyReduction, GateMode};
use crate::model::ResetScope;

/// Every knob of the per-batch update. Defaults are the published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_marg: f64,
    pub eta_min: f64,
    pub w_min: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub rho: f64,
    pub eta: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub gate: GateMode,
    pub entropy_reduction: EntropyReduction,
    /// Multiply base-loss sample weights by `exp(-H_exp,i)`.
    pub certainty_weighting: bool,
    /// Backpropagate through `h_exp` and `d_js` inside the anchor coefficient.
    pub differentiable_anchor: bool,
    pub prior_correction: bool,
    pub reset_scope: ResetScope,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            alpha: 2.0,
            beta: 1.0,
            lambda_marg: 0.1,
            eta_min: 0.2,
            w_min: 0.5,
            gamma_min: 0.0,
            gamma_max: 0.5,
            rho: 0.01,
            eta: 2.5e-4,
            momentum: 0.9,
            batch_size: 64,
            gate: GateMode::Reliability,
            entropy_reduction: EntropyReduction::MeanOfEntropies,
            certainty_weighting: false,
            differentiable_anchor: false,
            prior_correction: false,
            reset_scope: ResetScope::Affine,
        }
    }
}

fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn line_of(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    span.map(|r| format!(" (line {})", text[..r.start.min(text.len())].matches('\n').count() + 1))
        .unwrap_or_default()
}

/// Parses TOML into `T`, reporting failures with the dotted key path under
/// `prefix` and the line number.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, prefix: &str) -> Result<T> {
    let join = |path: String| match (prefix.is_empty(), path == ".") {
        (true, true) => "<root>".to_string(),
        (true, false) => path,
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{path}"),
    };
    let de = toml::Deserializer::parse(text).map_err(|e| cfg_err(&join(".".into()), format!("{}{}", e.message(), line_of(text, e.span()))))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        cfg_err(&join(path), format!("{}{}", inner.message(), line_of(text, inner.span())))
    })
}

impl AdapterConfig {
    /// Fails on invalid values; returns warnings for legal but degenerate ones.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let finite = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_marg", self.lambda_marg),
            ("eta", self.eta),
            ("momentum", self.momentum),
        ];
        for (k, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return Err(cfg_err(k, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.eta_min) {
            return Err(cfg_err("eta_min", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.w_min) {
            return Err(cfg_err("w_min", "must lie in [0, 1]"));
        }
        if self.w_min == 1.0 {
            warnings.push("w_min = 1 makes the agreement filter inert".to_string());
        }
        if !(0.0 <= self.gamma_min && self.gamma_min <= self.gamma_max && self.gamma_max <= 1.0) {
            return Err(cfg_err("gamma_min", "need 0 <= gamma_min <= gamma_max <= 1"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(cfg_err("rho", "must lie in (0, 1)"));
        }
        if self.momentum >= 1.0 {
            return Err(cfg_err("momentum", "must be < 1"));
        }
        if self.eta == 0.0 {
            warnings.push("eta = 0: parameters never move".to_string());
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be positive"));
        }
        if let GateMode::Forced(v) = self.gate {
            if !(0.0..=1.0).contains(&v) {
                return Err(cfg_err("gate", "forced gate value must lie in [0, 1]"));
            }
        }
        Ok(warnings)
    }
}

/// Named rungs of the method ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Frozen source, no updates, plain argmax of the original view.
    SourceOnly,
    /// Gate pinned open (`r_src = 1`), stabilizers off.
    Base,
    /// `Base` with a periodic hard reset.
    BasePeriodic,
    /// `Base` with the adaptive reset controller.
    BaseController,
    /// Reliability gate and all stabilizers.
    GatedFull,
    /// `GatedFull` with the reliability-vetoed adaptive controller.
    GatedFullController,
    /// `GatedFull` with the gate pinned open: identical non-gated terms,
    /// blind anchoring.
    UngatedFull,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::SourceOnly,
        Preset::Base,
        Preset::BasePeriodic,
        Preset::BaseController,
        Preset::GatedFull,
        Preset::GatedFullController,
        Preset::UngatedFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SourceOnly => "source-only",
            Preset::Base => "base",
            Preset::BasePeriodic => "base+periodic",
            Preset::BaseController => "base+controller",
            Preset::GatedFull => "gated-full",
            Preset::GatedFullController => "gated-full+controller",
            Preset::UngatedFull => "ungated-full",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| cfg_err("preset", format!("unknown preset `{name}`")))
    }

    /// Applies this preset's switches on top of `base`.
    pub fn apply(self, base: &AdapterConfig) -> AdapterConfig {
        let mut c = base.clone();
        match self {
            Preset::SourceOnly => {
                c.eta = 0.0;
                c.gamma_min = 0.0;
                c.gamma_max = 0.0;
                c.prior_correction = false;
            }
            Preset::Base | Preset::BasePeriodic | Preset::BaseController => {
                c.gate = GateMode::Forced(1.0);
                c.lambda_marg = 0.0;
                c.eta_min = 1.0;
                c.gamma_min = 0.0;
                c.gamma_max = 0.0;
                c.prior_correction = false;
            }
            Preset::GatedFull | Preset::GatedFullController => c.gate = GateMode::Reliability,
            Preset::UngatedFull => c.gate = GateMode::Forced(1.0),
        }
        c
    }

    pub fn controller_kind(self) -> ControllerKind {
        match self {
            Preset::SourceOnly | Preset::Base | Preset::GatedFull | Preset::UngatedFull => ControllerKind::None,
            Preset::BasePeriodic => ControllerKind::Periodic,
            Preset::BaseController => ControllerKind::Adaptive,
            Preset::GatedFullController => ControllerKind::ReliabilityGated,
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    None,
    Periodic,
    Adaptive,
    ReliabilityGated,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_errors_carry_key_paths() {
        let e = parse_toml::<AdapterConfig>("rho = 0.1\nlamda = 2.0\n", "adapter").unwrap_err();
        match e {
            Error::Config { key, msg } => {
                assert_eq!(key, "adapter.lamda");
                assert!(msg.contains("line 2"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match parse_toml::<AdapterConfig>("rho = \"x\"", "") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "rho"),
            other => panic!("{other:?}"),
        }
        assert!(parse_toml::<AdapterConfig>("rho = [", "").is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let c = AdapterConfig::default();
        assert!(c.validate().unwrap().is_empty());
        assert_eq!(c.rho, 0.01);
        assert_eq!(c.eta, 2.5e-4);
        assert_eq!(c.w_min, 0.5);
        assert_eq!(c.gamma_max, 0.5);
    }

    #[test]
    fn invalid_values_name_their_key() {
        let mut c = AdapterConfig::default();
        c.gamma_min = 0.6;
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "gamma_min"),
            other => panic!("{other:?}"),
        }
        let mut c = AdapterConfig::default();
        c.rho = 1.0;
        assert!(c.validate().is_err());
        let mut c = AdapterConfig::default();
        c.w_min = 1.0;
        assert_eq!(c.validate().unwrap().len(), 1);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert!(Preset::parse("nope").is_err());
    }

    #[test]
    fn base_pins_gate_open() {
        let c = Preset::Base.apply(&AdapterConfig::default());
        assert_eq!(c.gate, GateMode::Forced(1.0));
        assert_eq!(c.lambda_marg, 0.0);
        assert_eq!(Preset::SourceOnly.apply(&c).eta, 0.0);
    }

    #[test]
    fn ungated_full_differs_from_gated_full_only_in_gate() {
        let base = AdapterConfig::default();
        let mut u = Preset::UngatedFull.apply(&base);
        assert_eq!(u.gate, GateMode::Forced(1.0));
        u.gate = GateMode::Reliability;
        assert_eq!(u, Preset::GatedFull.apply(&base));
    }
}
