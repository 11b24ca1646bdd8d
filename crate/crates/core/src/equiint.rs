//! Equiintegrability moduli, concentrating test families, the
//! indicator-transport experiment and an `L¹` translation modulus.
//!
//! Both moduli are exact at grid granularity: on a grid, the worst set of a
//! given measure is a superlevel set, which greedy selection of the largest
//! cells finds. The last cell is taken fractionally so the moduli are
//! continuous in the budget.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dispersion::{regime_horizon, transported_linf_l1};
use crate::error::{check_dim, config, Result};
use crate::fields::ForceField;
use crate::flow::{FlowMap, IntegratorConfig};
use crate::geometry::{PhaseWindow, Rect};
use crate::grid::{PhaseGrid, PhaseGridFunction, XGridFunction};
use crate::transport::{
    green_terms, solve_cauchy, transport_derivative_fd, InitialData, TestFunction,
};

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        config(format!("measure budget must be positive, got {alpha}"))
    }
}

/// Mass of the best `budget`-measure selection from cells of measure
/// `cell` carrying `values` (sorted in place, descending).
fn greedy(values: &mut [f64], cell: f64, budget: f64) -> f64 {
    values.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut left = budget;
    let mut mass = 0.0;
    for &v in values.iter() {
        if left <= 0.0 || v <= 0.0 {
            break;
        }
        let take = cell.min(left);
        mass += v * take;
        left -= take;
    }
    mass
}

/// `|f| 1_K` fiber by fiber.
fn truncated_fibers(f: &PhaseGridFunction, k: &PhaseWindow) -> Result<Vec<Vec<f64>>> {
    let grid = f.grid();
    check_dim(grid.dim(), k.dim())?;
    let d = grid.dim();
    let (xg, vg) = (grid.x_grid(), grid.v_grid());
    let v_in: Vec<bool> = (0..grid.n_v_nodes())
        .map(|iv| {
            let mut v = vec![0.0; d];
            vg.node(iv, &mut v);
            k.v.contains(&v)
        })
        .collect();
    let mut x = vec![0.0; d];
    Ok(f.fibers()
        .enumerate()
        .filter_map(|(ix, fiber)| {
            xg.node(ix, &mut x);
            k.x.contains(&x).then(|| {
                fiber
                    .iter()
                    .zip(&v_in)
                    .filter(|(_, &inside)| inside)
                    .map(|(a, _)| a.abs())
                    .collect()
            })
        })
        .collect())
}

/// `sup Σ_x ∫_{A_x} |f| 1_K dv Δx` over families with `|A_x| ≤ α`.
pub fn modulus_v(f: &PhaseGridFunction, k: &PhaseWindow, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let grid = f.grid();
    let (cx, cv) = (grid.cell_volume_x(), grid.cell_volume_v());
    let mut fibers = truncated_fibers(f, k)?;
    let per_fiber: Vec<f64> = fibers
        .par_iter_mut()
        .map(|fib| greedy(fib, cv, alpha))
        .collect();
    Ok(per_fiber.iter().sum::<f64>() * cx)
}

/// `sup ∬_A |f| 1_K` over sets with `|A| ≤ α`.
pub fn modulus_xv(f: &PhaseGridFunction, k: &PhaseWindow, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let mut all: Vec<f64> = truncated_fibers(f, k)?.into_iter().flatten().collect();
    Ok(greedy(&mut all, f.grid().cell_volume(), alpha))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquiModulusReport {
    pub compact_region: PhaseWindow,
    pub alphas: Vec<f64>,
    pub modulus_v: Vec<f64>,
    pub modulus_xv: Vec<f64>,
}

impl EquiModulusReport {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "alpha,modulus_v,modulus_xv")?;
        for k in 0..self.alphas.len() {
            writeln!(
                out,
                "{},{},{}",
                self.alphas[k], self.modulus_v[k], self.modulus_xv[k]
            )?;
        }
        Ok(())
    }

    /// Both moduli are nondecreasing along increasing budgets.
    pub fn is_monotone(&self) -> bool {
        let mut idx: Vec<usize> = (0..self.alphas.len()).collect();
        idx.sort_by(|&a, &b| self.alphas[a].total_cmp(&self.alphas[b]));
        idx.windows(2).all(|w| {
            let tol = 1e-12;
            self.modulus_v[w[1]] + tol >= self.modulus_v[w[0]]
                && self.modulus_xv[w[1]] + tol >= self.modulus_xv[w[0]]
        })
    }
}

pub fn equi_modulus_report(
    f: &PhaseGridFunction,
    k: &PhaseWindow,
    alphas: &[f64],
) -> Result<EquiModulusReport> {
    let modulus_v = alphas
        .iter()
        .map(|&a| modulus_v(f, k, a))
        .collect::<Result<_>>()?;
    let modulus_xv = alphas
        .iter()
        .map(|&a| modulus_xv(f, k, a))
        .collect::<Result<_>>()?;
    Ok(EquiModulusReport {
        compact_region: k.clone(),
        alphas: alphas.to_vec(),
        modulus_v,
        modulus_xv,
    })
}

/// Unit-mass families on `[0,1]^{2d}` that separate the two kinds of
/// equiintegrability as `ε → 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsFamily {
    /// `ε^{-d} 1_{[0,ε]^d}(x) 1_{[0,1]^d}(v)`.
    XConcentration,
    /// `1_{[0,1]^d}(x) ε^{-d} 1_{[0,ε]^d}(v)`.
    VConcentration,
    /// `ε^{-2d} 1_{[0,ε]^{2d}}`.
    Joint,
    /// `(1 + sin(2π x₁/ε)) 1_{[0,1]^{2d}}`.
    Oscillation,
}

impl EpsFamily {
    pub fn member(self, eps: f64, d: usize) -> Result<InitialData> {
        if !(eps > 0.0 && eps <= 1.0) {
            return config(format!("family parameter must lie in (0, 1], got {eps}"));
        }
        let unit = Rect::cube(d, 0.0, 1.0)?;
        let small = Rect::cube(d, 0.0, eps)?;
        let h = eps.powi(-(d as i32));
        Ok(match self {
            Self::XConcentration => InitialData::constant(PhaseWindow::new(small, unit)?, h),
            Self::VConcentration => InitialData::constant(PhaseWindow::new(unit, small)?, h),
            Self::Joint => InitialData::constant(PhaseWindow::new(small.clone(), small)?, h * h),
            Self::Oscillation => {
                let w = 2.0 * std::f64::consts::PI / eps;
                InitialData::new(PhaseWindow::new(unit.clone(), unit)?, move |x, _| {
                    1.0 + (w * x[0]).sin()
                })
                .with_sup_bound(2.0)
            }
        })
    }

    pub fn sample(self, eps: f64, grid: &PhaseGrid) -> Result<PhaseGridFunction> {
        let m = self.member(eps, grid.dim())?;
        PhaseGridFunction::sample(grid.clone(), |x, v| m.eval(x, v))
    }
}

#[derive(Clone, Debug)]
pub struct IndicatorTransportSettings {
    /// `M` for the regime horizon.
    pub lipschitz: f64,
    /// Velocity window for measuring the fibers `A(t)_x`. When absent it is
    /// derived from the flow map for linear fields, and otherwise falls
    /// back to the velocity window of `f`'s grid.
    pub v_window: Option<Rect>,
    /// Velocity nodes per axis of the fiber-measure grid.
    pub nv_measure: usize,
    /// Time slices of the Green correction integral.
    pub n_slices: usize,
    pub slack_coeff: f64,
}

impl IndicatorTransportSettings {
    pub fn new(lipschitz: f64) -> Self {
        Self {
            lipschitz,
            v_window: None,
            nv_measure: 512,
            n_slices: 32,
            slack_coeff: crate::dispersion::DEFAULT_SLACK_COEFF,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndicatorTransportReport {
    pub t: f64,
    pub tau_used: f64,
    pub in_regime: bool,
    /// `|A|`.
    pub a_measure: f64,
    /// `max_x |A(t)_x|` over the x-nodes of `f`'s grid.
    pub sup_fiber_measure: f64,
    /// `2 t^{-d} |A|`.
    pub bound: f64,
    /// Additive allowance `c · 2d · Δv · L_v^{d-1}` of the measure grid.
    pub grid_slack: f64,
    pub pass: bool,
    /// Every transported value lies in `{0, 1}`.
    pub binary_values: bool,
    /// `∬ f Ψ 1_A(x)`.
    pub pairing_lhs: f64,
    /// `∬ f Ψ Φ(t)`.
    pub pairing_rhs: f64,
    /// `∫₀ᵗ ∬ Φ(s) (v·∇_x + F·∇_v)(fΨ)`.
    pub correction_term: f64,
    /// `|lhs − (rhs − correction)|`.
    pub residual: f64,
}

impl IndicatorTransportReport {
    pub fn write_csv(reports: &[IndicatorTransportReport], mut out: impl Write) -> Result<()> {
        writeln!(out, "t,sup_fiber_measure,bound,grid_slack,pass,pairing_lhs,pairing_rhs,correction_term,residual")?;
        for r in reports {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                r.sup_fiber_measure,
                r.bound,
                r.grid_slack,
                r.pass,
                r.pairing_lhs,
                r.pairing_rhs,
                r.correction_term,
                r.residual
            )?;
        }
        Ok(())
    }
}

/// Velocity box containing `{v : X(−t; x, v) ∈ A}` for every `x` in
/// `x_window`, when the flow is linear and `∂_vX(−t)` is invertible.
fn preimage_v_window(
    field: &dyn ForceField,
    a: &Rect,
    x_window: &Rect,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<Option<Rect>> {
    if field.linear_coefficients().is_none() {
        return Ok(None);
    }
    let d = field.dim();
    let map = FlowMap::new(field, -t, cfg)?;
    // X(−t; x, v) = Pxx x + Pxv v
    let mut pxx = DMatrix::zeros(d, d);
    let mut pxv = DMatrix::zeros(d, d);
    for j in 0..2 * d {
        let mut z = vec![0.0; 2 * d];
        z[j] = 1.0;
        map.apply(&mut z)?;
        for i in 0..d {
            if j < d {
                pxx[(i, j)] = z[i];
            } else {
                pxv[(i, j - d)] = z[i];
            }
        }
    }
    let Some(inv) = pxv.try_inverse() else {
        return Ok(None);
    };
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for y in a.corners() {
        for x in x_window.corners() {
            let rhs =
                nalgebra::DVector::from_vec(y.clone()) - &pxx * nalgebra::DVector::from_vec(x);
            let v = &inv * rhs;
            for i in 0..d {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
    }
    let r = Rect::new(lo, hi)?;
    // a cell of margin on each side keeps the fiber ends inside
    let pad = r.lengths().iter().fold(0.0f64, |m, l| m.max(*l)) * 0.01;
    Ok(Some(r.inflate(pad)))
}

/// Transports `Φ⁰ = 1_A(x)` to time `t`, measures the velocity fibers
/// `A(t)_x` against `2t^{-d}|A|`, and evaluates the terms of the identity
/// `∬fΨ1_A = ∬fΨΦ(t) − ∫₀ᵗ∬Φ(s)(v·∇_x+F·∇_v)(fΨ)` on `f`'s grid.
pub fn indicator_transport_experiment(
    field: &dyn ForceField,
    f: &PhaseGridFunction,
    a: &Rect,
    t: f64,
    psi: &TestFunction,
    settings: &IndicatorTransportSettings,
    cfg: &IntegratorConfig,
) -> Result<IndicatorTransportReport> {
    let grid = f.grid();
    let d = grid.dim();
    check_dim(field.dim(), d)?;
    check_dim(d, a.dim())?;
    if !(t > 0.0 && t.is_finite()) {
        return config("experiment time must be positive");
    }
    if !a.is_proper() {
        return config("A must be a bounded box");
    }
    let phi0 = InitialData::x_indicator(a.clone());

    let v_window = match &settings.v_window {
        Some(w) => w.clone(),
        None => preimage_v_window(field, a, &grid.window.x, t, cfg)?
            .unwrap_or_else(|| grid.window.v.clone()),
    };
    let measure_grid = PhaseGrid::new(
        PhaseWindow::new(grid.window.x.clone(), v_window)?,
        grid.nx,
        settings.nv_measure,
    )?;
    let sup = transported_linf_l1(field, &phi0, t, &measure_grid, cfg)?;
    let (_, hv) = measure_grid.max_spacing();
    let side = measure_grid
        .window
        .v
        .lengths()
        .iter()
        .fold(0.0f64, |m, l| m.max(*l));
    let slack = settings.slack_coeff * 2.0 * d as f64 * hv * side.powi(d as i32 - 1);
    let a_measure = a.volume();
    let bound = 2.0 * t.powi(-(d as i32)) * a_measure;
    let tau = regime_horizon(field, settings.lipschitz);

    let phi_t = solve_cauchy(field, &phi0, t, grid, cfg)?;
    let binary_values = phi_t.values().iter().all(|&p| p == 0.0 || p == 1.0);

    // fΨ and its transport derivative
    let vg = grid.v_grid();
    let mut v = vec![0.0; d];
    let psi_v: Vec<f64> = (0..grid.n_v_nodes())
        .map(|iv| {
            vg.node(iv, &mut v);
            psi.eval(&v)
        })
        .collect();
    let weighted: Vec<f64> = f
        .fibers()
        .flat_map(|fiber| {
            fiber
                .iter()
                .zip(&psi_v)
                .map(|(a, p)| a * p)
                .collect::<Vec<_>>()
        })
        .collect();
    let f_psi = PhaseGridFunction::new(grid.clone(), weighted)?;
    let d_f_psi = transport_derivative_fd(field, &f_psi)?;
    let terms = green_terms(field, &f_psi, &d_f_psi, &phi0, t, settings.n_slices, cfg)?;

    Ok(IndicatorTransportReport {
        t,
        tau_used: tau,
        in_regime: t <= tau,
        a_measure,
        sup_fiber_measure: sup,
        bound,
        grid_slack: slack,
        pass: sup <= bound + slack,
        binary_values,
        pairing_lhs: terms.lhs,
        pairing_rhs: terms.final_pairing,
        correction_term: terms.correction,
        residual: terms.residual,
    })
}

/// For each `δ`, the largest `Σ_x |g(x+s) − g(x)| Δx` over lattice shifts
/// `|s| ≤ δ`, where `g = 1_K ρ` extended by zero outside the grid.
pub fn translation_modulus(rho: &XGridFunction, k: &Rect, deltas: &[f64]) -> Result<Vec<f64>> {
    let grid = &rho.grid;
    let d = grid.dim();
    check_dim(d, k.dim())?;
    let n = grid.n;
    let h = grid.spacing();
    let mut x = vec![0.0; d];
    let g: Vec<f64> = rho
        .values
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            grid.node(i, &mut x);
            if k.contains(&x) {
                r
            } else {
                0.0
            }
        })
        .collect();
    let cell = grid.cell_volume();
    let diff_norm = |shift: &[i64]| -> f64 {
        // Σ over the union of both supports: indices where either term lives
        let mut idx = vec![0usize; d];
        let mut total = 0.0;
        for (i, &gi) in g.iter().enumerate() {
            grid.multi_index(i, &mut idx);
            let mut inside = true;
            let mut j = 0usize;
            for a in 0..d {
                let s = idx[a] as i64 + shift[a];
                if s < 0 || s >= n as i64 {
                    inside = false;
                    break;
                }
                j = j * n + s as usize;
            }
            let shifted = if inside { g[j] } else { 0.0 };
            total += (shifted - gi).abs();
        }
        // mass pushed off the grid by the shift
        let mut lost = 0.0;
        for (i, &gi) in g.iter().enumerate() {
            grid.multi_index(i, &mut idx);
            let mut reached = true;
            for a in 0..d {
                let s = idx[a] as i64 - shift[a];
                if s < 0 || s >= n as i64 {
                    reached = false;
                    break;
                }
            }
            if !reached {
                lost += gi.abs();
            }
        }
        (total + lost) * cell
    };
    deltas
        .iter()
        .map(|&delta| {
            if !(delta >= 0.0) {
                return config("shift radii must be nonnegative");
            }
            let reach: Vec<i64> = h
                .iter()
                .map(|hh| (delta / hh + 1e-9).floor() as i64)
                .collect();
            let mut shift = vec![0i64; d];
            let mut best = 0.0f64;
            let count: usize = reach.iter().map(|r| (2 * r + 1) as usize).product();
            for mut c in 0..count {
                for a in 0..d {
                    let span = (2 * reach[a] + 1) as usize;
                    shift[a] = (c % span) as i64 - reach[a];
                    c /= span;
                }
                let len: f64 = shift
                    .iter()
                    .zip(&h)
                    .map(|(&s, hh)| (s as f64 * hh).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if len <= delta * (1.0 + 1e-9) {
                    best = best.max(diff_norm(&shift));
                }
            }
            Ok(best)
        })
        .collect()
}
