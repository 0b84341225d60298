//! Run configuration.
//!
//! A run is described by one TOML file. Values are resolved in three layers:
//! the named `preset` (if any), then the file, then `key=value` overrides from
//! the command line (dotted keys such as `hmc.n_draws=200`). The merged tree
//! is deserialized into [`RunConfig`] and validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SimulateStatic,
    SimulateDynamic,
    FitStatic,
    FitDynamic,
}

impl Mode {
    pub fn is_dynamic(self) -> bool {
        matches!(self, Self::SimulateDynamic | Self::FitDynamic)
    }

    pub fn is_fit(self) -> bool {
        matches!(self, Self::FitStatic | Self::FitDynamic)
    }
}

/// What the CLI subcommand asks for; combined with the static/dynamic choice
/// it determines the [`Mode`] when the file does not name one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Simulate,
    Fit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionKind {
    /// Columns drawn from `Dirichlet(dirichlet_alpha)`.
    #[default]
    Dirichlet,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub beta: f64,
    /// Unnormalized true weights; its length is the true rank `r`.
    pub omega_u: Vec<f64>,
    /// Wishart scale diagonals for modes 1 and 2; `None` means all ones.
    pub diag_scale1: Option<Vec<f64>>,
    pub diag_scale2: Option<Vec<f64>>,
    pub transition: TransitionKind,
    pub dirichlet_alpha: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            omega_u: vec![1.0, 4.0, 6.0, 7.0, 9.0],
            diag_scale1: None,
            diag_scale2: None,
            transition: TransitionKind::Dirichlet,
            dirichlet_alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowerParamKind {
    #[default]
    Centered,
    NonCentered,
}

impl From<LowerParamKind> for sckpd::model::LowerParam {
    fn from(k: LowerParamKind) -> Self {
        match k {
            LowerParamKind::Centered => Self::Centered,
            LowerParamKind::NonCentered => Self::NonCentered,
        }
    }
}

/// Which Cholesky factor the prior targets are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSource {
    /// Cholesky factor of the sample covariance.
    #[default]
    Covariance,
    /// Cholesky factor of the inverse sample covariance.
    Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExponentKind {
    #[default]
    TimeIndex,
    CyclePlusSeason,
}

impl From<ExponentKind> for sckpd::dynamic::ExponentConvention {
    fn from(k: ExponentKind) -> Self {
        match k {
            ExponentKind::TimeIndex => Self::TimeIndex,
            ExponentKind::CyclePlusSeason => Self::CyclePlusSeason,
        }
    }
}

/// What to do when a shape equation has no root (`c_i ≤ 1`) and the solver
/// returns its boundary value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Refuse to fit.
    Error,
    /// Fit with the boundary shape, whose diagonal prior is the scale-invariant
    /// `a → 0` limit.
    #[default]
    Allow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub lower_param: LowerParamKind,
    pub target_source: TargetSource,
    pub exponent: ExponentKind,
    pub boundary_policy: BoundaryPolicy,
    /// Shape of the Gamma prior on the transition gammas.
    pub transition_alpha: f64,
    pub hyper_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lower_param: LowerParamKind::default(),
            target_source: TargetSource::Covariance,
            exponent: ExponentKind::TimeIndex,
            boundary_policy: BoundaryPolicy::default(),
            transition_alpha: 1.0,
            hyper_tol: 1e-10,
        }
    }
}

/// Where chains start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// The `data` start moved uphill by L-BFGS for up to `init_opt_iters`
    /// iterations.
    #[default]
    Mode,
    /// Diagonals fitted to the sample variances, zero lowers, uniform
    /// weights and `θ = ½`, each coordinate jittered by `init_jitter`.
    Data,
    /// Uniform on `[-init_radius, init_radius]` in every coordinate.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcSection {
    pub chains: usize,
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub target_accept: f64,
    pub n_warmup: usize,
    pub n_draws: usize,
    pub adapt_mass: bool,
    pub dense_mass: bool,
    pub init: InitKind,
    pub init_radius: f64,
    pub init_jitter: f64,
    pub init_opt_iters: u64,
    pub step_jitter: f64,
}

impl Default for HmcSection {
    fn default() -> Self {
        let d = sckpd::hmc::HmcConfig::default();
        Self {
            chains: 4,
            step_size: d.step_size,
            n_leapfrog: 100,
            target_accept: d.target_accept,
            n_warmup: d.n_warmup,
            n_draws: d.n_draws,
            adapt_mass: d.adapt_mass,
            dense_mass: d.dense_mass,
            init: InitKind::Mode,
            init_radius: d.init_radius,
            init_jitter: 0.01,
            init_opt_iters: 3000,
            step_jitter: d.step_jitter,
        }
    }
}

impl HmcSection {
    pub fn to_core(&self, seed: u64) -> sckpd::hmc::HmcConfig {
        sckpd::hmc::HmcConfig {
            step_size: self.step_size,
            n_leapfrog: self.n_leapfrog,
            target_accept: self.target_accept,
            n_warmup: self.n_warmup,
            n_draws: self.n_draws,
            seed,
            mass: None,
            adapt_mass: self.adapt_mass,
            dense_mass: self.dense_mass,
            init_radius: self.init_radius,
            step_jitter: self.step_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub preset: Option<String>,
    pub d1: usize,
    pub d2: usize,
    /// Number of fitted components.
    pub k: usize,
    /// Observations per block.
    pub n: usize,
    pub seasons: usize,
    pub cycles: usize,
    pub seed: u64,
    /// Observation CSV for fits.
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Subtract the sample mean before fitting.
    pub center: bool,
    pub simulation: SimulationConfig,
    pub model: ModelConfig,
    pub hmc: HmcSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            preset: None,
            d1: 0,
            d2: 0,
            k: 0,
            n: 0,
            seasons: 1,
            cycles: 1,
            seed: 0,
            input: None,
            output_dir: PathBuf::from("out"),
            center: false,
            simulation: SimulationConfig::default(),
            model: ModelConfig::default(),
            hmc: HmcSection::default(),
        }
    }
}

pub const PRESETS: &[&str] = &["paper-static", "paper-overspecified", "paper-separable", "paper-dynamic"];

/// Length-5 and length-4 Wishart scale diagonals of the static simulations.
pub const WISHART_SCALE_5: [f64; 5] = [0.75, 1.0, 0.2, 0.3, 0.1];
pub const WISHART_SCALE_4: [f64; 4] = [1.0, 0.4, 0.3, 0.2];

fn preset_table(name: &str) -> Result<Table> {
    let text = match name {
        "paper-static" | "paper-overspecified" | "paper-separable" => {
            let (k, omega) = match name {
                "paper-static" => (5, "[1.0, 4.0, 6.0, 7.0, 9.0]"),
                "paper-overspecified" => (8, "[1.0, 4.0, 6.0, 7.0, 9.0]"),
                _ => (5, "[1.0]"),
            };
            format!(
                "d1 = 4\nd2 = 5\nk = {k}\nn = 500\n[simulation]\nbeta = 2.0\nomega_u = {omega}\n\
                 diag_scale1 = {:?}\ndiag_scale2 = {:?}\n",
                WISHART_SCALE_4, WISHART_SCALE_5
            )
        }
        "paper-dynamic" => format!(
            "d1 = 5\nd2 = 2\nk = 5\nn = 500\nseasons = 4\ncycles = 3\n[simulation]\nbeta = 2.0\n\
             omega_u = [1.0, 4.0, 6.0, 7.0, 9.0]\ndiag_scale1 = {:?}\ntransition = \"dirichlet\"\n\
             dirichlet_alpha = 0.05\n",
            WISHART_SCALE_5
        ),
        other => {
            return Err(HarnessError::Config(format!("unknown preset {other:?}; known presets: {}", PRESETS.join(", "))))
        }
    };
    text.parse::<Table>().map_err(|e| HarnessError::Config(format!("preset {name}: {e}")))
}

/// Recursive merge; values in `over` win.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=value`; the value is read as TOML and falls back to a string.
pub fn parse_override(s: &str) -> Result<Table> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {s:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(HarnessError::Config(format!("override {s:?} has an empty key")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or(key);
    let mut table = Table::new();
    table.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(table));
        table = outer;
    }
    Ok(table)
}

impl RunConfig {
    /// Resolves preset, file text and overrides.
    pub fn from_layers(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(text) => text.parse::<Table>().map_err(|e| HarnessError::Config(format!("invalid TOML: {e}")))?,
            None => Table::new(),
        };
        let mut over = Table::new();
        for o in overrides {
            merge(&mut over, parse_override(o)?);
        }
        let preset = over
            .get("preset")
            .or_else(|| file_table.get("preset"))
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| HarnessError::Config("preset must be a string".into())))
            .transpose()?;
        let mut tree = match &preset {
            Some(p) => preset_table(p)?,
            None => Table::new(),
        };
        merge(&mut tree, file_table);
        merge(&mut tree, over);
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.check_preset_dims()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_layers(Some(&text), overrides)
    }

    fn check_preset_dims(&self) -> Result<()> {
        if self.preset.is_none() {
            return Ok(());
        }
        for (mode, d, scale) in [(1, self.d1, &self.simulation.diag_scale1), (2, self.d2, &self.simulation.diag_scale2)] {
            if let Some(s) = scale {
                if s.len() != d {
                    return Err(HarnessError::Config(format!(
                        "preset {:?} fixes a length-{} diagonal scale for mode {mode}, but d{mode} = {d}",
                        self.preset.as_deref().unwrap_or(""),
                        s.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The mode for a subcommand: the configured one if compatible, otherwise
    /// dynamic when more than one block is configured.
    pub fn resolve_mode(&self, action: Action) -> Result<Mode> {
        let dynamic = self.seasons * self.cycles > 1;
        let mode = match (self.mode, action) {
            (Some(m), Action::Fit) if m.is_fit() => m,
            (Some(m), Action::Simulate) if !m.is_fit() => m,
            (Some(m), _) => {
                return Err(HarnessError::Config(format!("mode {m:?} cannot be used with the {action:?} command")))
            }
            (None, Action::Simulate) if dynamic => Mode::SimulateDynamic,
            (None, Action::Simulate) => Mode::SimulateStatic,
            (None, Action::Fit) if dynamic => Mode::FitDynamic,
            (None, Action::Fit) => Mode::FitStatic,
        };
        Ok(mode)
    }

    /// Checks every field the mode needs.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.d1 < 2 || self.d2 < 2 {
            return bad(format!("d1 and d2 must be at least 2 (got {}, {})", self.d1, self.d2));
        }
        if self.seasons == 0 || self.cycles == 0 {
            return bad("seasons and cycles must be positive".into());
        }
        if !mode.is_dynamic() && self.seasons * self.cycles != 1 {
            return bad("static modes need seasons = cycles = 1".into());
        }
        if mode.is_fit() {
            if self.k == 0 {
                return bad("k (number of fitted components) must be positive".into());
            }
            if self.input.is_none() {
                return bad("fit modes need an input CSV".into());
            }
            let h = &self.hmc;
            if h.chains == 0 || h.n_draws < 4 {
                return bad("hmc needs at least one chain and 4 draws".into());
            }
            self.hmc.to_core(self.seed).validate(1).map_err(|e| HarnessError::Config(e.to_string()))?;
            if !(h.init_jitter >= 0.0) {
                return bad("hmc.init_jitter must be nonnegative".into());
            }
            if !(self.model.transition_alpha > 0.0) || !(self.model.hyper_tol > 0.0) {
                return bad("transition_alpha and hyper_tol must be positive".into());
            }
        } else {
            let s = &self.simulation;
            if self.n == 0 {
                return bad("n (observations per block) must be positive".into());
            }
            if s.omega_u.is_empty() || s.omega_u.iter().any(|w| !(*w > 0.0)) {
                return bad("simulation.omega_u must be nonempty and positive".into());
            }
            if !(s.beta > 0.0) {
                return bad("simulation.beta must be positive".into());
            }
            if !(s.dirichlet_alpha > 0.0) {
                return bad("simulation.dirichlet_alpha must be positive".into());
            }
            for (mode, d, scale) in [(1, self.d1, &s.diag_scale1), (2, self.d2, &s.diag_scale2)] {
                if let Some(v) = scale {
                    if v.len() != d || v.iter().any(|x| !(*x > 0.0)) {
                        return bad(format!("simulation.diag_scale{mode} needs {d} positive entries"));
                    }
                }
            }
        }
        Ok(())
    }
}
