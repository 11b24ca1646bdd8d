//! The JSON run configuration. Every field has a default, so `{}` is a
//! valid configuration; the resolved configuration is echoed into every
//! report.

use std::path::{Path, PathBuf};

use kinetra::equiint::EpsFamily;
use kinetra::{
    make_builtin, BuiltinField, BuiltinKind, Error, IntegratorConfig, PhaseWindow, Result,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: BuiltinKind,
    pub dim: usize,
    pub params: Vec<f64>,
    /// Overrides the field's Lipschitz constant `M`.
    pub lipschitz: Option<f64>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            kind: BuiltinKind::Zero,
            dim: 1,
            params: Vec::new(),
            lipschitz: None,
        }
    }
}

impl FieldConfig {
    pub fn build(&self) -> Result<BuiltinField> {
        let f = make_builtin(self.kind, self.dim, &self.params)?;
        Ok(match self.lipschitz {
            Some(m) => f.with_declared_lipschitz(m),
            None => f,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub nv: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nx: 64, nv: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub count: usize,
    /// The sweep starts at `min_fraction · T`.
    pub min_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            count: 32,
            min_fraction: 0.01,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub tail_tol: f64,
    pub slack_coeff: f64,
    pub duality_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tail_tol: 1e-6,
            slack_coeff: kinetra::dispersion::DEFAULT_SLACK_COEFF,
            duality_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Rows `x₁..x_d, v₁..v_d`.
    pub points: Vec<Vec<f64>>,
    /// CSV file of further points, relative to the config file.
    pub points_file: Option<PathBuf>,
    pub t: f64,
    /// Output instants per trajectory, besides `t = 0`.
    pub samples: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            points: Vec::new(),
            points_file: None,
            t: 1.0,
            samples: 1,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauConfig {
    pub lipschitz: Option<f64>,
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JacobianConfig {
    pub samples: usize,
    pub det_trials: usize,
}

impl Default for JacobianConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            det_trials: 100_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualityConfig {
    pub t: f64,
    pub slices: usize,
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self { t: 1.0, slices: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolventConfig {
    pub lambda: f64,
    /// Random sources for the operator-norm estimate.
    pub sources: usize,
}

impl Default for ResolventConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            sources: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiKind {
    Bump,
    Ball,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentConfig {
    pub t: f64,
    pub psi: PsiKind,
    pub radius: f64,
    pub sobolev_s: f64,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            psi: PsiKind::Bump,
            radius: 1.0,
            sobolev_s: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquiConfig {
    pub family: EpsFamily,
    pub eps: Vec<f64>,
    pub alphas: Vec<f64>,
    pub indicator_width: f64,
    /// Velocity nodes per axis for the fiber measures.
    pub indicator_nv: usize,
}

impl Default for EquiConfig {
    fn default() -> Self {
        Self {
            family: EpsFamily::XConcentration,
            eps: vec![0.25, 1.0 / 16.0, 1.0 / 64.0],
            alphas: vec![0.01, 0.05, 0.1, 0.2],
            indicator_width: 0.05,
            indicator_nv: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Dispersion,
    Jacobian,
    Duality,
    Resolvent,
    Equi,
    #[default]
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub field: FieldConfig,
    /// Computational window; defaults to `[-2, 2]^{2d}`.
    pub window: Option<PhaseWindow>,
    pub grid: GridConfig,
    pub integrator: IntegratorConfig,
    /// Explicit times; otherwise a log sweep up to the regime horizon.
    pub times: Option<Vec<f64>>,
    pub sweep: SweepConfig,
    pub tolerances: Tolerances,
    /// Support of the indicator initial data; defaults to `[0, 1]^{2d}`.
    pub initial: Option<PhaseWindow>,
    pub flow: FlowConfig,
    pub tau: TauConfig,
    pub suite: Suite,
    pub seed: u64,
    pub jacobian: JacobianConfig,
    pub duality: DualityConfig,
    pub resolvent: ResolventConfig,
    pub moment: MomentConfig,
    pub equi: EquiConfig,
    pub format: Format,
    /// Not echoed into reports, so output is independent of its location.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        if let Some(p) = &cfg.flow.points_file {
            if p.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.flow.points_file = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    pub fn window(&self) -> Result<PhaseWindow> {
        match &self.window {
            Some(w) => Ok(w.clone()),
            None => PhaseWindow::cube(self.dim(), -2.0, 2.0),
        }
    }

    pub fn initial(&self) -> Result<PhaseWindow> {
        match &self.initial {
            Some(w) => Ok(w.clone()),
            None => PhaseWindow::cube(self.dim(), 0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field.build()?;
        self.integrator.validate()?;
        let d = self.dim();
        let window = self.window()?;
        let initial = self.initial()?;
        if window.dim() != d || initial.dim() != d {
            return Err(bad(
                "window and initial support must match the field dimension",
            ));
        }
        if !window.is_proper() || !initial.is_proper() {
            return Err(bad("window and initial support must be bounded boxes"));
        }
        if self.grid.nx == 0 || self.grid.nv == 0 {
            return Err(bad("grid sizes must be positive"));
        }
        if let Some(ts) = &self.times {
            if ts.is_empty() || ts.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                return Err(bad("times must be a nonempty list of positive reals"));
            }
        }
        if self.sweep.count == 0
            || !(self.sweep.min_fraction > 0.0 && self.sweep.min_fraction <= 1.0)
        {
            return Err(bad("sweep needs count > 0 and min_fraction in (0, 1]"));
        }
        let t = &self.tolerances;
        if !(t.tail_tol > 0.0 && t.slack_coeff >= 0.0 && t.duality_tol > 0.0) {
            return Err(bad("tolerances must be positive"));
        }
        if let Some(m) = self.field.lipschitz {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(bad("lipschitz must be finite and nonnegative"));
            }
        }
        if !self.flow.t.is_finite() {
            return Err(bad("flow.t must be finite"));
        }
        if !(self.duality.t >= 0.0) || self.duality.slices == 0 {
            return Err(bad("duality needs t >= 0 and slices > 0"));
        }
        if !(self.resolvent.lambda > 0.0) {
            return Err(bad("resolvent.lambda must be positive"));
        }
        if !(self.moment.radius > 0.0 && self.moment.sobolev_s > 0.0 && self.moment.sobolev_s < 1.0)
        {
            return Err(bad("moment needs radius > 0 and sobolev_s in (0, 1)"));
        }
        let e = &self.equi;
        if e.eps.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || e.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(bad(
                "equi.eps must lie in (0, 1] and equi.alphas be positive",
            ));
        }
        if !(e.indicator_width > 0.0 && e.indicator_width <= 1.0) || e.indicator_nv == 0 {
            return Err(bad(
                "equi.indicator_width must lie in (0, 1] and indicator_nv be positive",
            ));
        }
        Ok(())
    }
}
