//! Mixed norms and verifiers for the short-time dispersion estimate
//!
//! ```text
//! ‖f(t)‖_{L∞_x(L¹_v)} ≤ 2 |t|^{-d} ‖f⁰‖_{L¹_x(L∞_v)},   0 < t ≤ T,
//! ```
//!
//! and for the Jacobian, Gronwall, injectivity and determinant estimates
//! behind it. All matrix norms are max-entry norms.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, config, Result};
use crate::fields::ForceField;
use crate::flow::{
    integrate_flow, integrate_variational_series, FlowMap, IntegratorConfig, PhasePoint,
};
use crate::geometry::{PhaseWindow, Rect};
use crate::grid::{PhaseGrid, PhaseGridFunction};
use crate::linalg::{det_leibniz, det_lu, factorial, max_entry_norm};
use crate::transport::InitialData;

/// Time horizon used when the mixing-time equation has no finite root
/// (`M = 0`), divided by the rotation rate of velocity-dependent fields.
pub const M0_TIME_CAP: f64 = 2.0;

/// Relative tolerance on the Jacobian and Gronwall comparisons, covering
/// integration roundoff in the equality cases.
pub const JACOBIAN_REL_TOL: f64 = 1e-9;

/// Below this `|det ∂_vX|` the Jacobian is treated as singular.
pub const SINGULAR_DET: f64 = 1e-14;

/// Default multiplier of the staircase allowance, see [`grid_slack`].
pub const DEFAULT_SLACK_COEFF: f64 = 1.0;

/// `max_x Σ_v |f| Δv`.
pub fn norm_linf_l1(f: &PhaseGridFunction) -> f64 {
    let cv = f.grid().cell_volume_v();
    f.fibers()
        .map(|fiber| fiber.iter().map(|a| a.abs()).sum::<f64>() * cv)
        .fold(0.0, f64::max)
}

/// `Σ_x max_v |f| Δx`.
pub fn norm_l1_linf(f: &PhaseGridFunction) -> f64 {
    let cx = f.grid().cell_volume_x();
    f.fibers()
        .map(|fiber| fiber.iter().fold(0.0f64, |m, a| m.max(a.abs())))
        .sum::<f64>()
        * cx
}

/// `(d!/3) M T² e^{M T²/2} − 1`.
pub fn mixing_equation_residual(m: f64, d: usize, t: f64) -> f64 {
    factorial(d) / 3.0 * m * t * t * (m * t * t / 2.0).exp() - 1.0
}

/// The positive root `T` of `(d!/3) M T² e^{MT²/2} = 1`, or `+∞` when
/// `M = 0`.
pub fn mixing_time_lower_bound(m: f64, d: usize) -> f64 {
    assert!(
        m >= 0.0 && m.is_finite(),
        "M must be finite and nonnegative"
    );
    assert!(d >= 1, "dimension must be positive");
    if m == 0.0 {
        return f64::INFINITY;
    }
    let g = |t: f64| mixing_equation_residual(m, d, t);
    let mut hi = 1.0;
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    bisect(g, 0.0, hi)
}

/// Bisection to adjacent floats on an increasing function with
/// `g(lo) ≤ 0 ≤ g(hi)`; returns the endpoint with smaller `|g|`.
fn bisect(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if g(lo).abs() <= g(hi).abs() {
        lo
    } else {
        hi
    }
}

/// `∫₀ᵗ (t−s) s e^{s²M/2} M ds`, composite Simpson.
pub fn injectivity_remainder(m: f64, t: f64) -> f64 {
    const N: usize = 2000;
    let h = t / N as f64;
    let f = |s: f64| (t - s) * s * (s * s * m / 2.0).exp() * m;
    let mut acc = f(0.0) + f(t);
    for k in 1..N {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    acc * h / 3.0
}

/// Largest `τ₀` with `∫₀^τ₀ (τ₀−s) s e^{s²M/2} M ds ≤ τ₀/2`; `+∞` when
/// `M = 0`.
pub fn injectivity_time(m: f64) -> f64 {
    assert!(
        m >= 0.0 && m.is_finite(),
        "M must be finite and nonnegative"
    );
    if m == 0.0 {
        return f64::INFINITY;
    }
    // the remainder over t grows with t, so the sign changes once
    let g = |t: f64| injectivity_remainder(m, t) / t - 0.5;
    let mut hi = 1.0;
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut lo = hi / 2.0;
    while lo > 1e-300 && g(lo) >= 0.0 {
        lo /= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Rate at which a velocity-dependent field turns velocities, the
/// Frobenius norm of `∇_vF` at the origin over `√2` (the modulus `|B|` for
/// magnetic fields).
fn velocity_rate(field: &dyn ForceField) -> f64 {
    if !field.velocity_dependent() {
        return 0.0;
    }
    let d = field.dim();
    let mut j = vec![0.0; d * d];
    field.jacobian_v(&vec![0.0; d], &vec![0.0; d], &mut j);
    (j.iter().map(|a| a * a).sum::<f64>() / 2.0).sqrt()
}

/// The end of the verified time range: `T` from the mixing-time equation,
/// or [`M0_TIME_CAP`]` / max(1, |B|)` when `M = 0`.
pub fn regime_horizon(field: &dyn ForceField, m: f64) -> f64 {
    let t = mixing_time_lower_bound(m, field.dim());
    if t.is_finite() {
        t
    } else {
        M0_TIME_CAP / velocity_rate(field).max(1.0)
    }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_spaced_times(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo, "need 0 < lo <= hi");
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|k| {
                    if k + 1 == n {
                        hi
                    } else {
                        (a + (b - a) * k as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// The default sweep: 32 log-spaced times in `[T/100, T]`.
pub fn default_time_sweep(horizon: f64) -> Vec<f64> {
    log_spaced_times(horizon / 100.0, horizon, 32)
}

/// Relative staircase allowance of a grid,
/// `c · max(Δx, Δv) · Σ_i (2/Lx_i + 2/Lv_i)`: the perimeter-to-volume
/// factor of the window times the coarsest spacing.
pub fn grid_slack(grid: &PhaseGrid, coeff: f64) -> f64 {
    let (hx, hv) = grid.max_spacing();
    let perimeter: f64 = grid
        .window
        .x
        .lengths()
        .iter()
        .chain(grid.window.v.lengths().iter())
        .map(|l| 2.0 / l)
        .sum();
    coeff * hx.max(hv) * perimeter
}

/// Bounding box of `Z(t)(box)`. Exact (up to integration error) for linear
/// fields, where it is the hull of the transported corners; for other
/// fields a boundary lattice is transported and the result inflated by 10%.
pub fn transported_bounding_box(
    field: &dyn ForceField,
    support: &PhaseWindow,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<PhaseWindow> {
    check_dim(field.dim(), support.dim())?;
    if !support.is_proper() {
        return config("support must be a bounded box");
    }
    let d = support.dim();
    let points: Vec<Vec<f64>> = if field.linear_coefficients().is_some() {
        support.corners()
    } else {
        lattice(support, 5)
    };
    let map = FlowMap::new(field, t, cfg)?;
    let mut lo = vec![f64::INFINITY; 2 * d];
    let mut hi = vec![f64::NEG_INFINITY; 2 * d];
    for mut z in points {
        map.apply(&mut z)?;
        for k in 0..2 * d {
            lo[k] = lo[k].min(z[k]);
            hi[k] = hi[k].max(z[k]);
        }
    }
    let mut w = PhaseWindow::new(
        Rect::new(lo[..d].to_vec(), hi[..d].to_vec())?,
        Rect::new(lo[d..].to_vec(), hi[d..].to_vec())?,
    )?;
    if field.linear_coefficients().is_none() {
        let pad =
            w.x.lengths()
                .iter()
                .chain(w.v.lengths().iter())
                .fold(0.0f64, |m, l| m.max(*l))
                * 0.1;
        w = w.inflate(pad);
    }
    Ok(w)
}

fn lattice(b: &PhaseWindow, per_axis: usize) -> Vec<Vec<f64>> {
    let d = b.dim();
    let lo: Vec<f64> = b.x.lo.iter().chain(&b.v.lo).copied().collect();
    let hi: Vec<f64> = b.x.hi.iter().chain(&b.v.hi).copied().collect();
    let total = per_axis.pow(2 * d as u32);
    (0..total)
        .map(|mut k| {
            (0..2 * d)
                .map(|a| {
                    let i = k % per_axis;
                    k /= per_axis;
                    lo[a] + (hi[a] - lo[a]) * i as f64 / (per_axis - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// `max_x Σ_v |f⁰(Z(−t; x, v))| Δv` without materializing the solution.
pub fn transported_linf_l1(
    field: &dyn ForceField,
    f0: &InitialData,
    t: f64,
    grid: &PhaseGrid,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    check_dim(field.dim(), grid.dim())?;
    check_dim(field.dim(), f0.dim())?;
    let d = grid.dim();
    let map = FlowMap::new(field, -t, cfg)?;
    let xg = grid.x_grid();
    let vg = grid.v_grid();
    let nv = grid.n_v_nodes();
    // For linear maps Z(x, v) = Z(x, 0) + Z(0, v); the v part is shared by
    // every fiber.
    let shared_v: Option<Vec<f64>> = if map.is_linear() && cfg.safety.is_none() {
        let mut buf = vec![0.0; 2 * d * nv];
        for (iv, z) in buf.chunks_exact_mut(2 * d).enumerate() {
            vg.node(iv, &mut z[d..]);
            map.apply(z)?;
        }
        Some(buf)
    } else {
        None
    };
    let sums = (0..grid.n_x_nodes())
        .into_par_iter()
        .map(|ix| -> Result<f64> {
            let mut z = vec![0.0; 2 * d];
            let mut acc = 0.0;
            match &shared_v {
                Some(pv) => {
                    xg.node(ix, &mut z[..d]);
                    map.apply(&mut z)?;
                    let base = z.clone();
                    for part in pv.chunks_exact(2 * d) {
                        for k in 0..2 * d {
                            z[k] = base[k] + part[k];
                        }
                        acc += f0.eval_state(&z).abs();
                    }
                }
                None => {
                    for iv in 0..nv {
                        xg.node(ix, &mut z[..d]);
                        vg.node(iv, &mut z[d..]);
                        map.apply(&mut z)?;
                        acc += f0.eval_state(&z).abs();
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.into_iter().fold(0.0, f64::max) * grid.cell_volume_v())
}

/// The sharp constant `C(t)` with `‖f(t)‖ ≤ C(t) ‖f⁰‖` known for the three
/// explicitly solvable fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpEnvelope {
    /// `t^{-d}`.
    Free,
    /// `|sin t|^{-d}`.
    Harmonic,
    /// `2^d (e^t − e^{−t})^{−d}`.
    Repulsive,
}

impl SharpEnvelope {
    pub fn for_builtin(kind: crate::fields::BuiltinKind) -> Option<Self> {
        use crate::fields::BuiltinKind as K;
        match kind {
            K::Zero => Some(Self::Free),
            K::Harmonic => Some(Self::Harmonic),
            K::Repulsive => Some(Self::Repulsive),
            K::Magnetic2D | K::Magnetic3D => None,
        }
    }

    pub fn factor(self, t: f64, d: usize) -> f64 {
        let base = match self {
            Self::Free => t.abs(),
            Self::Harmonic => t.sin().abs(),
            Self::Repulsive => (t.exp() - (-t).exp()).abs() / 2.0,
        };
        base.powi(-(d as i32))
    }
}

/// How [`verify_dispersion`] lays out its grids.
#[derive(Clone, Debug)]
pub enum DispersionGrid {
    /// One grid for every time; it must contain the transported support.
    Fixed(PhaseGrid),
    /// A fresh `nx^d × nv^d` grid per time on the bounding box of the
    /// transported support. Needs bounded support.
    Adaptive { nx: usize, nv: usize },
}

#[derive(Clone, Debug)]
pub struct DispersionSettings {
    /// `M`, the Lipschitz constant entering `T`.
    pub lipschitz: f64,
    pub slack_coeff: f64,
    pub sharp: Option<SharpEnvelope>,
}

impl DispersionSettings {
    pub fn new(lipschitz: f64) -> Self {
        Self {
            lipschitz,
            slack_coeff: DEFAULT_SLACK_COEFF,
            sharp: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixingReport {
    pub dim: usize,
    pub lipschitz: f64,
    /// The horizon `T` (or the `M = 0` cap).
    pub tau_used: f64,
    pub initial_norm: f64,
    pub times: Vec<f64>,
    pub measured_norm: Vec<f64>,
    /// `2 t^{-d} ‖f⁰‖`.
    pub bound: Vec<f64>,
    pub ratio: Vec<f64>,
    /// `measured · t^d / ‖f⁰‖`, to be compared with 2.
    pub scaled: Vec<f64>,
    pub grid_slack: Vec<f64>,
    pub in_regime: Vec<bool>,
    pub pass: Vec<bool>,
    pub sharp: Option<SharpEnvelope>,
    /// `C(t) ‖f⁰‖` for the sharp envelope, if any.
    pub sharp_bound: Option<Vec<f64>>,
    pub sharp_pass: Option<Vec<bool>>,
}

impl MixingReport {
    /// Every in-regime time passes the factor-2 bound and, when present,
    /// the sharp bound.
    pub fn all_pass(&self) -> bool {
        self.failures().is_empty()
    }

    /// Indices of in-regime times that fail a check.
    pub fn failures(&self) -> Vec<usize> {
        (0..self.times.len())
            .filter(|&k| {
                self.in_regime[k]
                    && (!self.pass[k] || self.sharp_pass.as_ref().map_or(false, |s| !s[k]))
            })
            .collect()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "t,measured,bound,ratio,pass,in_regime,grid_slack,sharp_bound,sharp_pass"
        )?;
        for k in 0..self.times.len() {
            let (sb, sp) = match (&self.sharp_bound, &self.sharp_pass) {
                (Some(b), Some(p)) => (b[k].to_string(), p[k].to_string()),
                _ => (String::new(), String::new()),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.times[k],
                self.measured_norm[k],
                self.bound[k],
                self.ratio[k],
                self.pass[k],
                self.in_regime[k],
                self.grid_slack[k],
                sb,
                sp
            )?;
        }
        Ok(())
    }
}

fn aligned_grid(window: PhaseWindow, nx: usize, nv: usize) -> Result<PhaseGrid> {
    // degenerate extents (a point mass in some direction) get unit width
    let fix = |r: Rect| {
        let (lo, hi) =
            r.lo.iter()
                .zip(&r.hi)
                .map(|(&l, &h)| if h > l { (l, h) } else { (l - 0.5, h + 0.5) })
                .unzip();
        Rect { lo, hi }
    };
    PhaseGrid::new(
        PhaseWindow {
            x: fix(window.x),
            v: fix(window.v),
        },
        nx,
        nv,
    )
}

/// Transports `f0` to each time and compares `‖f(t)‖_{L∞L¹}` with
/// `2 t^{-d} ‖f⁰‖_{L¹L∞}`. Times past the horizon are computed but marked
/// out of regime.
pub fn verify_dispersion(
    field: &dyn ForceField,
    f0: &InitialData,
    times: &[f64],
    grid: &DispersionGrid,
    settings: &DispersionSettings,
    cfg: &IntegratorConfig,
) -> Result<MixingReport> {
    let d = field.dim();
    check_dim(d, f0.dim())?;
    if times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return config("dispersion times must be positive");
    }
    let tau = regime_horizon(field, settings.lipschitz);
    let initial_norm = match grid {
        DispersionGrid::Fixed(g) => {
            norm_l1_linf(&PhaseGridFunction::sample(g.clone(), |x, v| f0.eval(x, v))?)
        }
        DispersionGrid::Adaptive { nx, nv } => {
            let g = aligned_grid(f0.support().clone(), *nx, *nv)?;
            norm_l1_linf(&PhaseGridFunction::sample(g, |x, v| f0.eval(x, v))?)
        }
    };
    let mut report = MixingReport {
        dim: d,
        lipschitz: settings.lipschitz,
        tau_used: tau,
        initial_norm,
        times: times.to_vec(),
        measured_norm: Vec::new(),
        bound: Vec::new(),
        ratio: Vec::new(),
        scaled: Vec::new(),
        grid_slack: Vec::new(),
        in_regime: Vec::new(),
        pass: Vec::new(),
        sharp: settings.sharp,
        sharp_bound: settings.sharp.map(|_| Vec::new()),
        sharp_pass: settings.sharp.map(|_| Vec::new()),
    };
    for &t in times {
        let g = match grid {
            DispersionGrid::Fixed(g) => g.clone(),
            DispersionGrid::Adaptive { nx, nv } => aligned_grid(
                transported_bounding_box(field, f0.support(), t, cfg)?,
                *nx,
                *nv,
            )?,
        };
        let measured = transported_linf_l1(field, f0, t, &g, cfg)?;
        let slack = grid_slack(&g, settings.slack_coeff);
        let bound = 2.0 * t.powi(-(d as i32)) * initial_norm;
        let ratio = if bound > 0.0 { measured / bound } else { 0.0 };
        report.measured_norm.push(measured);
        report.bound.push(bound);
        report.ratio.push(ratio);
        report.scaled.push(if initial_norm > 0.0 {
            measured * t.powi(d as i32) / initial_norm
        } else {
            0.0
        });
        report.grid_slack.push(slack);
        report.in_regime.push(t <= tau);
        report.pass.push(measured <= bound * (1.0 + slack));
        if let Some(env) = settings.sharp {
            let sb = env.factor(t, d) * initial_norm;
            report.sharp_bound.as_mut().unwrap().push(sb);
            report
                .sharp_pass
                .as_mut()
                .unwrap()
                .push(measured <= sb * (1.0 + slack));
        }
    }
    Ok(report)
}

/// `min |X(−t; x, v′) − X(−t; x, v)| / |v − v′|` over distinct pairs.
/// Returns `+∞` with fewer than two distinct samples.
pub fn injectivity_margin(
    field: &dyn ForceField,
    x: &[f64],
    v_samples: &[Vec<f64>],
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    check_dim(field.dim(), x.len())?;
    let feet = v_samples
        .iter()
        .map(|v| {
            let z = PhasePoint::new(x.to_vec(), v.clone())?;
            Ok(integrate_flow(field, &z, -t, cfg)?.x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pair_margin(v_samples, &feet))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

fn pair_margin(vs: &[Vec<f64>], feet: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            let dv = dist(&vs[i], &vs[j]);
            if dv > 0.0 {
                best = best.min(dist(&feet[i], &feet[j]) / dv);
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JacobianReport {
    pub dim: usize,
    pub lipschitz: f64,
    pub tau_used: f64,
    pub injectivity_time: f64,
    pub times: Vec<f64>,
    /// `max 1/|det ∂_vX(−t)|` over samples.
    pub det_inv: Vec<f64>,
    /// `2 t^{-d}`.
    pub det_bound: Vec<f64>,
    /// `max ‖∂_vX(−t)‖`.
    pub gronwall_norm: Vec<f64>,
    /// `t e^{t²M/2}`.
    pub gronwall_bound: Vec<f64>,
    /// Over sample pairs sharing `x`; `None` when no pair does.
    pub injectivity_margin: Vec<Option<f64>>,
    pub injectivity_bound: Vec<f64>,
    pub singular: Vec<bool>,
    pub in_regime: Vec<bool>,
    pub det_pass: Vec<bool>,
    pub gronwall_pass: Vec<bool>,
    /// Gated on `t ≤ τ₀`; `true` outside that range.
    pub injectivity_pass: Vec<bool>,
}

impl JacobianReport {
    /// In-regime times failing any check.
    pub fn failures(&self) -> Vec<usize> {
        (0..self.times.len())
            .filter(|&k| {
                self.in_regime[k]
                    && !(self.det_pass[k] && self.gronwall_pass[k] && self.injectivity_pass[k])
            })
            .collect()
    }

    pub fn all_pass(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "t,det_inv,det_bound,gronwall_norm,gronwall_bound,injectivity_margin,injectivity_bound,singular,in_regime,pass"
        )?;
        for k in 0..self.times.len() {
            let margin = self.injectivity_margin[k].map_or(String::new(), |m| m.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.times[k],
                self.det_inv[k],
                self.det_bound[k],
                self.gronwall_norm[k],
                self.gronwall_bound[k],
                margin,
                self.injectivity_bound[k],
                self.singular[k],
                self.in_regime[k],
                self.det_pass[k] && self.gronwall_pass[k] && self.injectivity_pass[k]
            )?;
        }
        Ok(())
    }
}

/// Checks `1/|det ∂_vX(−t)| ≤ 2t^{−d}`, `‖∂_vX(−t)‖ ≤ t e^{t²M/2}` and the
/// injectivity margin at every sample and time. `times` must be positive
/// and increasing.
pub fn jacobian_bounds(
    field: &dyn ForceField,
    lipschitz: f64,
    samples: &[PhasePoint],
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<JacobianReport> {
    let d = field.dim();
    if times.iter().any(|&t| !(t > 0.0)) || times.windows(2).any(|w| w[1] <= w[0]) {
        return config("jacobian times must be positive and increasing");
    }
    for s in samples {
        check_dim(d, s.dim())?;
    }
    let back: Vec<f64> = times.iter().map(|t| -t).collect();
    // per sample: for each time (jx, X(−t))
    let series = samples
        .par_iter()
        .map(|z| integrate_variational_series(field, z, &back, cfg))
        .collect::<Result<Vec<_>>>()?;
    let tau = regime_horizon(field, lipschitz);
    let tau0 = injectivity_time(lipschitz);
    // samples grouped by identical x
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match groups.iter_mut().find(|g| samples[g[0]].x == s.x) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    let mut r = JacobianReport {
        dim: d,
        lipschitz,
        tau_used: tau,
        injectivity_time: tau0,
        times: times.to_vec(),
        det_inv: Vec::new(),
        det_bound: Vec::new(),
        gronwall_norm: Vec::new(),
        gronwall_bound: Vec::new(),
        injectivity_margin: Vec::new(),
        injectivity_bound: Vec::new(),
        singular: Vec::new(),
        in_regime: Vec::new(),
        det_pass: Vec::new(),
        gronwall_pass: Vec::new(),
        injectivity_pass: Vec::new(),
    };
    for (k, &t) in times.iter().enumerate() {
        let mut det_inv = 0.0f64;
        let mut norm = 0.0f64;
        let mut singular = false;
        for s in &series {
            let det = det_lu(&s[k].jx).abs();
            if det < SINGULAR_DET {
                singular = true;
                det_inv = f64::INFINITY;
            } else {
                det_inv = det_inv.max(1.0 / det);
            }
            norm = norm.max(max_entry_norm(&s[k].jx));
        }
        let margin = groups
            .iter()
            .filter(|g| g.len() > 1)
            .map(|g| {
                let vs: Vec<Vec<f64>> = g.iter().map(|&i| samples[i].v.clone()).collect();
                let feet: Vec<Vec<f64>> = g.iter().map(|&i| series[i][k].z.x.clone()).collect();
                pair_margin(&vs, &feet)
            })
            .reduce(f64::min);
        let det_bound = 2.0 * t.powi(-(d as i32));
        let gronwall_bound = t * (t * t * lipschitz / 2.0).exp();
        let tol = 1.0 + JACOBIAN_REL_TOL;
        r.det_inv.push(det_inv);
        r.det_bound.push(det_bound);
        r.gronwall_norm.push(norm);
        r.gronwall_bound.push(gronwall_bound);
        r.injectivity_margin.push(margin);
        r.injectivity_bound.push(t / 2.0);
        r.singular.push(singular);
        r.in_regime.push(t <= tau);
        r.det_pass.push(!singular && det_inv <= det_bound * tol);
        r.gronwall_pass.push(norm <= gronwall_bound * tol);
        r.injectivity_pass
            .push(t > tau0 || margin.map_or(true, |m| m * tol >= t / 2.0));
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetPerturbationReport {
    pub dim: usize,
    pub trials: usize,
    pub eps: f64,
    pub seed: u64,
    pub violations: usize,
    /// `min det(I+A) − (1 − d!‖A‖)` over trials.
    pub min_margin: f64,
    /// `max |det_LU − det_Leibniz|`, for `d ≤ 4`.
    pub max_lu_leibniz_diff: Option<f64>,
}

impl DetPerturbationReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Largest `eps` accepted by [`det_perturbation_check`].
pub fn det_perturbation_eps_limit(d: usize) -> f64 {
    1.0 / (2.0 * d as f64 * factorial(d))
}

/// `det(I + A) ≥ 1 − d! ‖A‖` for random `A` with entries uniform in
/// `[−eps, eps]`.
pub fn det_perturbation_check(
    d: usize,
    trials: usize,
    eps: f64,
    seed: u64,
) -> Result<DetPerturbationReport> {
    if d == 0 {
        return config("dimension must be positive");
    }
    if !(eps >= 0.0) || eps > det_perturbation_eps_limit(d) {
        return config(format!(
            "eps = {eps} is outside [0, 1/(2·d·d!)] = [0, {}]",
            det_perturbation_eps_limit(d)
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fact = factorial(d);
    let mut report = DetPerturbationReport {
        dim: d,
        trials,
        eps,
        seed,
        violations: 0,
        min_margin: f64::INFINITY,
        max_lu_leibniz_diff: (d <= 4).then_some(0.0),
    };
    let mut a = DMatrix::zeros(d, d);
    for _ in 0..trials {
        for e in a.iter_mut() {
            *e = if eps > 0.0 {
                rng.gen_range(-eps..=eps)
            } else {
                0.0
            };
        }
        let m = DMatrix::identity(d, d) + &a;
        let det = det_lu(&m);
        let margin = det - (1.0 - fact * max_entry_norm(&a));
        report.min_margin = report.min_margin.min(margin);
        if margin < 0.0 {
            report.violations += 1;
        }
        if let Some(diff) = report.max_lu_leibniz_diff.as_mut() {
            *diff = diff.max((det - det_leibniz(&m)).abs());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_builtin, BuiltinKind};
    use crate::transport::solve_cauchy;

    fn cfg() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    #[test]
    fn norms_of_simple_functions() {
        let g = PhaseGrid::new(PhaseWindow::cube(1, 0.0, 1.0).unwrap(), 50, 50).unwrap();
        let one = PhaseGridFunction::sample(g.clone(), |_, _| 1.0).unwrap();
        assert!((norm_linf_l1(&one) - 1.0).abs() <= 0.02);
        assert!((norm_l1_linf(&one) - 1.0).abs() <= 0.02);
        let zero = PhaseGridFunction::zeros(g);
        assert_eq!(norm_linf_l1(&zero), 0.0);
        assert_eq!(norm_l1_linf(&zero), 0.0);

        let wide = PhaseGrid::new(
            PhaseWindow::new(
                Rect::cube(1, -8.0, 8.0).unwrap(),
                Rect::cube(1, -1.0, 1.0).unwrap(),
            )
            .unwrap(),
            400,
            4,
        )
        .unwrap();
        let gauss = PhaseGridFunction::sample(wide, |x, _| (-x[0] * x[0]).exp()).unwrap();
        assert!((norm_l1_linf(&gauss) - std::f64::consts::PI.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn free_transported_slice() {
        let z = make_builtin(BuiltinKind::Zero, 1, &[]).unwrap();
        let f0 = InitialData::indicator(PhaseWindow::cube(1, 0.0, 1.0).unwrap());
        let g = PhaseGrid::new(
            PhaseWindow::new(
                Rect::cube(1, 0.0, 3.0).unwrap(),
                Rect::cube(1, 0.0, 1.0).unwrap(),
            )
            .unwrap(),
            300,
            200,
        )
        .unwrap();
        let f = solve_cauchy(&z, &f0, 2.0, &g, &cfg()).unwrap();
        let dv = 1.0 / 200.0;
        assert!((norm_linf_l1(&f) - 0.5).abs() <= dv + 1e-12);
        let streamed = transported_linf_l1(&z, &f0, 2.0, &g, &cfg()).unwrap();
        assert!((streamed - norm_linf_l1(&f)).abs() < 1e-12);
    }

    #[test]
    fn mixing_time_examples() {
        assert!(mixing_time_lower_bound(0.0, 3).is_infinite());
        let t1 = mixing_time_lower_bound(1.0, 1);
        assert!((t1 - 1.2049).abs() < 1e-4, "{t1}");
        assert!(mixing_time_lower_bound(1.0, 2) < t1);
        assert!(mixing_time_lower_bound(2.0, 1) < t1);
        for m in [0.1, 1.0, 10.0] {
            for d in 1..=3 {
                let t = mixing_time_lower_bound(m, d);
                assert!(mixing_equation_residual(m, d, t).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn injectivity_time_balances_remainder() {
        assert!(injectivity_time(0.0).is_infinite());
        let t = injectivity_time(1.0);
        assert!((injectivity_remainder(1.0, t) - t / 2.0).abs() < 1e-9);
        assert!(injectivity_time(2.0) < t);
    }

    #[test]
    fn log_spacing() {
        let ts = log_spaced_times(0.01, 1.0, 3);
        assert!((ts[0] - 0.01).abs() < 1e-15 && (ts[1] - 0.1).abs() < 1e-12 && ts[2] == 1.0);
        assert_eq!(default_time_sweep(2.0).len(), 32);
    }

    #[test]
    fn jacobian_examples() {
        let z = make_builtin(BuiltinKind::Zero, 2, &[]).unwrap();
        let p = PhasePoint::new(vec![0.3, -0.2], vec![1.0, 0.5]).unwrap();
        let r = jacobian_bounds(&z, 0.0, &[p], &[0.5, 1.0, 2.0], &cfg()).unwrap();
        for (k, t) in r.times.iter().enumerate() {
            assert!((r.det_inv[k] - t.powi(-2)).abs() < 1e-10);
            assert!((r.gronwall_norm[k] - t).abs() < 1e-10);
        }
        assert!(r.all_pass());

        let h = make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap();
        let p = PhasePoint::new(vec![0.1], vec![0.2]).unwrap();
        let r = jacobian_bounds(&h, 1.0, &[p], &[1.0], &cfg()).unwrap();
        assert!((r.det_inv[0] - 1.0 / 1f64.sin()).abs() < 1e-9);
        assert!((r.gronwall_norm[0] - 1f64.sin()).abs() < 1e-9);
        assert!(r.det_inv[0] <= r.det_bound[0] && r.gronwall_norm[0] <= r.gronwall_bound[0]);
        assert!(jacobian_bounds(&h, 1.0, &[], &[1.0, 0.5], &cfg()).is_err());
    }

    #[test]
    fn understated_lipschitz_breaks_gronwall() {
        let r = make_builtin(BuiltinKind::Repulsive, 1, &[]).unwrap();
        let p = PhasePoint::new(vec![0.0], vec![1.0]).unwrap();
        let rep = jacobian_bounds(&r, 0.0, &[p], &[1.0], &cfg()).unwrap();
        assert!(rep.in_regime[0] && !rep.gronwall_pass[0]);
        assert!(!rep.all_pass());
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let h = make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap();
        let p = PhasePoint::new(vec![0.0], vec![0.0]).unwrap();
        let rep = jacobian_bounds(&h, 1.0, &[p], &[std::f64::consts::PI], &cfg()).unwrap();
        assert!(rep.singular[0] || rep.det_inv[0] > 1e8);
        assert!(!rep.in_regime[0]);
        assert!(rep.all_pass());
    }

    #[test]
    fn injectivity_examples() {
        let z = make_builtin(BuiltinKind::Zero, 1, &[]).unwrap();
        let vs = vec![vec![-1.0], vec![0.5], vec![2.0]];
        let m = injectivity_margin(&z, &[0.0], &vs, 0.7, &cfg()).unwrap();
        assert!((m - 0.7).abs() < 1e-12);
        let h = make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap();
        let m = injectivity_margin(&h, &[0.3], &vs, 1.0, &cfg()).unwrap();
        assert!((m - 1f64.sin()).abs() < 1e-9 && m >= 0.5);
        let m = injectivity_margin(&h, &[0.3], &vs, std::f64::consts::PI, &cfg()).unwrap();
        assert!(m < 1e-8);
    }

    #[test]
    fn det_perturbation_examples() {
        let r = det_perturbation_check(3, 1000, 0.0, 1).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.min_margin, 0.0);
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.9]);
        assert!((det_lu(&a) - 0.81).abs() < 1e-15);
        assert!(det_lu(&a) >= 1.0 - 2.0 * 0.1);
        assert!(det_perturbation_check(2, 10, 0.2, 1).is_err());
        let r = det_perturbation_check(3, 20_000, 0.01, 7).unwrap();
        assert!(r.pass());
        assert!(r.max_lu_leibniz_diff.unwrap() < 1e-12);
    }

    #[test]
    fn dispersion_small_grids() {
        let f0 = InitialData::indicator(PhaseWindow::cube(1, 0.0, 1.0).unwrap());
        for kind in [
            BuiltinKind::Zero,
            BuiltinKind::Harmonic,
            BuiltinKind::Repulsive,
        ] {
            let field = make_builtin(kind, 1, &[]).unwrap();
            let m = field.lipschitz_bound().unwrap();
            let horizon = regime_horizon(&field, m);
            let mut s = DispersionSettings::new(m);
            s.sharp = SharpEnvelope::for_builtin(kind);
            let r = verify_dispersion(
                &field,
                &f0,
                &default_time_sweep(horizon),
                &DispersionGrid::Adaptive { nx: 128, nv: 128 },
                &s,
                &cfg(),
            )
            .unwrap();
            assert!(r.all_pass(), "{kind:?}: {:?}", r.failures());
            assert!((r.initial_norm - 1.0).abs() < 1e-12);
            if kind == BuiltinKind::Zero {
                assert!(r
                    .ratio
                    .iter()
                    .zip(&r.grid_slack)
                    .all(|(q, s)| *q <= 0.5 * (1.0 + s)));
            }
        }
    }

    #[test]
    fn harmonic_unit_time_example() {
        let h = make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap();
        let f0 = InitialData::indicator(PhaseWindow::cube(1, 0.0, 1.0).unwrap());
        let r = verify_dispersion(
            &h,
            &f0,
            &[1.0],
            &DispersionGrid::Adaptive { nx: 256, nv: 256 },
            &DispersionSettings::new(1.0),
            &cfg(),
        )
        .unwrap();
        assert!(r.measured_norm[0] <= 1.0 / 1f64.sin() + 0.02);
        assert!(r.pass[0]);
    }

    #[test]
    fn corner_box_matches_closed_form() {
        let h = make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap();
        let b = transported_bounding_box(
            &h,
            &PhaseWindow::cube(1, 0.0, 1.0).unwrap(),
            std::f64::consts::FRAC_PI_2,
            &cfg(),
        )
        .unwrap();
        // (x, v) ↦ (v, −x)
        assert!((b.x.lo[0]).abs() < 1e-9 && (b.x.hi[0] - 1.0).abs() < 1e-9);
        assert!((b.v.lo[0] + 1.0).abs() < 1e-9 && b.v.hi[0].abs() < 1e-9);
    }
}
