//! Run configuration: TOML file, environment and flag overrides, validation.

use std::path::{Path, PathBuf};

use lobscale::{Error, ModelParams, ModelSpec, RegimeKind, ScalingRegime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_SEED: u64 = 20261015;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    FirstOrder,
    LlnSweep,
    FastClt,
    SlowClt,
    OuConsistency,
    ItoWentzell,
    KernelCheck,
    Liquidation,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        Self::FirstOrder,
        Self::LlnSweep,
        Self::FastClt,
        Self::SlowClt,
        Self::OuConsistency,
        Self::ItoWentzell,
        Self::KernelCheck,
        Self::Liquidation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FirstOrder => "first-order",
            Self::LlnSweep => "lln-sweep",
            Self::FastClt => "fast-clt",
            Self::SlowClt => "slow-clt",
            Self::OuConsistency => "ou-consistency",
            Self::ItoWentzell => "ito-wentzell",
            Self::KernelCheck => "kernel-check",
            Self::Liquidation => "liquidation",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::config("experiment.name", format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub regime: RegimeKind,
    pub dt: f64,
    pub alpha: f64,
    /// Derived from `alpha` for the fast and slow regimes when absent.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub params: ModelParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { name: "example-3-10".into(), params: ModelParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// CSV with `t,shares` rows; overrides `slices` and `total`.
    pub file: Option<PathBuf>,
    pub slices: usize,
    pub total: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { file: None, slices: 10, total: 0.5 }
    }
}

/// Settings of every experiment; each experiment reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: ExperimentKind,
    /// Discrete simulator paths.
    pub paths: usize,
    /// Limit-side Monte Carlo paths; defaults to `paths`.
    pub limit_paths: Option<usize>,
    /// RK4 step of the first-order solver.
    pub solver_dt: f64,
    /// Step of the fluctuation SDE integration.
    pub dt_sde: f64,
    /// Grid tick of the fluctuation SDE integration.
    pub limit_tick: f64,
    /// Expected price excursion used to size grid windows.
    pub excursion: f64,
    /// `dt` levels of the LLN sweep.
    pub dt_levels: Vec<f64>,
    /// Number of halvings in the OU consistency check.
    pub refinements: usize,
    /// `(dt_sde, tick)` levels of the Itô-Wentzell check.
    pub mesh_levels: Vec<[f64; 2]>,
    pub schedule: ScheduleConfig,
    pub permanent: bool,
    pub confidence: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: ExperimentKind::FirstOrder,
            paths: 100,
            limit_paths: None,
            solver_dt: 1e-3,
            dt_sde: 1e-2,
            limit_tick: 0.05,
            excursion: 1.0,
            dt_levels: vec![1e-2, 1e-3, 1e-4],
            refinements: 3,
            mesh_levels: vec![[0.02, 0.1], [0.01, 0.05], [0.005, 0.025]],
            schedule: ScheduleConfig::default(),
            permanent: false,
            confidence: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; all logical cores when absent.
    #[serde(default)]
    pub parallelism: Option<usize>,
    /// Snapshot stride (solver steps) for emitted book profiles.
    #[serde(default)]
    pub stride: Option<usize>,
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Values given on the command line or in the environment; `None` leaves the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub experiment: Option<String>,
    pub model: Option<String>,
    pub regime: Option<RegimeKind>,
    pub dt: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub stride: Option<usize>,
    pub parallelism: Option<usize>,
}

impl RunConfig {
    /// Defaults for an experiment: the regime and model it is normally run with.
    pub fn preset(kind: ExperimentKind) -> Self {
        let (regime, alpha, model) = match kind {
            ExperimentKind::FastClt | ExperimentKind::OuConsistency | ExperimentKind::KernelCheck => {
                (RegimeKind::Fast, 0.6, "example-fast")
            }
            ExperimentKind::Liquidation => (RegimeKind::Fast, 0.6, "example-fast"),
            _ => (RegimeKind::Slow, 0.4, "example-3-10"),
        };
        Self {
            seed: DEFAULT_SEED,
            out: default_out(),
            parallelism: None,
            stride: None,
            scaling: ScalingConfig { regime, dt: 1e-3, alpha, beta: None, horizon: 1.0 },
            model: ModelConfig { name: model.into(), params: ModelParams::default() },
            experiment: ExperimentConfig { name: kind, ..ExperimentConfig::default() },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| locate_field(text, s.start)).unwrap_or_default();
            Error::config(if field.is_empty() { "<root>".to_string() } else { field }, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), Error> {
        if let Some(e) = &o.experiment {
            self.experiment.name = ExperimentKind::parse(e)?;
        }
        if let Some(m) = &o.model {
            self.model.name = m.clone();
        }
        if let Some(r) = o.regime {
            self.scaling.regime = r;
        }
        if let Some(dt) = o.dt {
            self.scaling.dt = dt;
        }
        if let Some(a) = o.alpha {
            self.scaling.alpha = a;
        }
        if o.beta.is_some() {
            self.scaling.beta = o.beta;
        }
        if let Some(p) = o.paths {
            self.experiment.paths = p;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if o.stride.is_some() {
            self.stride = o.stride;
        }
        if o.parallelism.is_some() {
            self.parallelism = o.parallelism;
        }
        Ok(())
    }

    pub fn regime(&self) -> Result<ScalingRegime<f64>, Error> {
        let s = &self.scaling;
        let beta = match (s.beta, s.regime) {
            (Some(b), _) => b,
            (None, RegimeKind::Fast) => 2.0 * (1.0 - s.alpha),
            (None, RegimeKind::Slow) => 1.0 - s.alpha,
            (None, RegimeKind::FirstOrderOnly) => {
                return Err(Error::config("scaling.beta", "required for the first-order-only regime"))
            }
        };
        ScalingRegime::new(s.dt, s.alpha, beta, s.horizon, s.regime).map_err(|e| Error::config("scaling", e.to_string()))
    }

    pub fn model_spec(&self, regime: &ScalingRegime<f64>) -> Result<ModelSpec<f64>, Error> {
        ModelSpec::builtin(&self.model.name, &self.model.params, regime).map_err(|e| match e {
            Error::Config { field, message } if field.starts_with("model") => Error::Config { field, message },
            other => Error::config("model", other.to_string()),
        })
    }

    /// Full validation; returns the regime on success.
    pub fn validate(&self) -> Result<ScalingRegime<f64>, Error> {
        let regime = self.regime()?;
        let e = &self.experiment;
        let need = |kind: RegimeKind| -> Result<(), Error> {
            if regime.kind() != kind {
                return Err(Error::config(
                    "scaling.regime",
                    format!("experiment `{}` requires the {kind:?} regime, got {:?}", e.name.name(), regime.kind()),
                ));
            }
            Ok(())
        };
        match e.name {
            ExperimentKind::FastClt | ExperimentKind::OuConsistency | ExperimentKind::KernelCheck => need(RegimeKind::Fast)?,
            ExperimentKind::SlowClt | ExperimentKind::ItoWentzell => need(RegimeKind::Slow)?,
            ExperimentKind::Liquidation => need(if e.permanent { RegimeKind::Slow } else { RegimeKind::Fast })?,
            ExperimentKind::FirstOrder | ExperimentKind::LlnSweep => {}
        }
        if e.paths == 0 {
            return Err(Error::config("experiment.paths", "must be positive"));
        }
        if e.limit_paths == Some(0) {
            return Err(Error::config("experiment.limit_paths", "must be positive"));
        }
        for (name, v) in [("solver_dt", e.solver_dt), ("dt_sde", e.dt_sde), ("limit_tick", e.limit_tick)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("experiment.{name}"), format!("must be positive, got {v}")));
            }
        }
        if !(e.excursion >= 0.0) {
            return Err(Error::config("experiment.excursion", "must be non-negative"));
        }
        if !(e.confidence > 0.0 && e.confidence < 1.0) {
            return Err(Error::config("experiment.confidence", format!("{} outside (0,1)", e.confidence)));
        }
        if e.name == ExperimentKind::LlnSweep && e.dt_levels.len() < 3 {
            return Err(Error::config("experiment.dt_levels", "a sweep needs at least 3 levels"));
        }
        if self.parallelism == Some(0) {
            return Err(Error::config("parallelism", "must be positive"));
        }
        self.model_spec(&regime)?;
        Ok(regime)
    }

    pub fn limit_paths(&self) -> usize {
        self.experiment.limit_paths.unwrap_or(self.experiment.paths)
    }

    /// SHA-256 of the canonical JSON of everything that affects results
    /// (the output directory and the thread count do not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.parallelism = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Dotted path of the TOML key enclosing byte offset `at`.
fn locate_field(text: &str, at: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
        if offset > at {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}
