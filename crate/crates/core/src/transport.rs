//! Solution operators built on the characteristic flow.
//!
//! Everything here is semi-Lagrangian: values at a grid node are obtained
//! by following the characteristic through that node backward in time and
//! evaluating the data at its foot, `f(t, x, v) = f⁰(Z(-t; x, v))`. There
//! is no interpolation when the data is given analytically, so indicator
//! data stays `{0, 1}`-valued after transport.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{check_dim, config, Result};
use crate::fields::ForceField;
use crate::flow::{FlowMap, IntegratorConfig, PhasePoint};
use crate::geometry::{PhaseWindow, Rect};
use crate::grid::{fill_fibers, PhaseGrid, PhaseGridFunction, XGridFunction};

type PhaseFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Data `f⁰(x, v)` given as a callable, vanishing outside `support`.
#[derive(Clone)]
pub struct InitialData {
    eval: PhaseFn,
    support: PhaseWindow,
    sup_bound: Option<f64>,
}

impl fmt::Debug for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitialData")
            .field("support", &self.support)
            .field("sup_bound", &self.sup_bound)
            .finish_non_exhaustive()
    }
}

impl InitialData {
    pub fn new(
        support: PhaseWindow,
        f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Arc::new(f),
            support,
            sup_bound: None,
        }
    }

    /// Declares `sup |f⁰|`, used to size resolvent quadratures.
    pub fn with_sup_bound(mut self, bound: f64) -> Self {
        self.sup_bound = Some(bound);
        self
    }

    /// The indicator of a phase-space box.
    pub fn indicator(support: PhaseWindow) -> Self {
        Self::new(support, |_, _| 1.0).with_sup_bound(1.0)
    }

    /// `1_A(x)`, constant in velocity.
    pub fn x_indicator(a: Rect) -> Self {
        let d = a.dim();
        Self::indicator(PhaseWindow {
            x: a,
            v: Rect::unbounded(d),
        })
    }

    pub fn constant(support: PhaseWindow, c: f64) -> Self {
        Self::new(support, move |_, _| c).with_sup_bound(c.abs())
    }

    /// Nearest-cell lookup into a grid function.
    pub fn from_grid(f: PhaseGridFunction) -> Self {
        let support = f.grid().window.clone();
        let sup = f.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self::new(support, move |x, v| f.nearest(x, v)).with_sup_bound(sup)
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn support(&self) -> &PhaseWindow {
        &self.support
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    pub fn eval(&self, x: &[f64], v: &[f64]) -> f64 {
        if self.support.contains(x, v) {
            (self.eval)(x, v)
        } else {
            0.0
        }
    }

    pub(crate) fn eval_state(&self, z: &[f64]) -> f64 {
        let d = z.len() / 2;
        self.eval(&z[..d], &z[d..])
    }
}

type VelFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VelGrad = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A velocity weight `Ψ(v)` supported in the ball `|v| ≤ support_radius`.
#[derive(Clone)]
pub struct TestFunction {
    eval: VelFn,
    grad: VelGrad,
    support_radius: f64,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("support_radius", &self.support_radius)
            .finish_non_exhaustive()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

impl TestFunction {
    pub fn new(
        support_radius: f64,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Arc::new(eval),
            grad: Arc::new(grad),
            support_radius,
        }
    }

    /// The smooth bump `exp(1 - 1/(1 - |v|²/R²))`, equal to 1 at the origin.
    pub fn bump(radius: f64) -> Self {
        let r2 = radius * radius;
        let value = move |v: &[f64]| {
            let u = v.iter().map(|c| c * c).sum::<f64>() / r2;
            if u < 1.0 {
                (1.0 - 1.0 / (1.0 - u)).exp()
            } else {
                0.0
            }
        };
        Self::new(radius, value, move |v, out| {
            let u = v.iter().map(|c| c * c).sum::<f64>() / r2;
            if u < 1.0 {
                let psi = (1.0 - 1.0 / (1.0 - u)).exp();
                let k = -2.0 * psi / (r2 * (1.0 - u) * (1.0 - u));
                for (o, c) in out.iter_mut().zip(v) {
                    *o = k * c;
                }
            } else {
                out.fill(0.0);
            }
        })
    }

    /// `Ψ ≡ 1` on the closed ball. Not differentiable on the sphere; the
    /// gradient is reported as zero.
    pub fn ball_indicator(radius: f64) -> Self {
        Self::new(radius, |_| 1.0, |_, out| out.fill(0.0))
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        if norm(v) <= self.support_radius {
            (self.eval)(v)
        } else {
            0.0
        }
    }

    pub fn grad(&self, v: &[f64], out: &mut [f64]) {
        if norm(v) <= self.support_radius {
            (self.grad)(v, out)
        } else {
            out.fill(0.0)
        }
    }
}

/// `exp(-1/(1-s²))` on `|s| < 1` and its logarithmic derivative.
fn bump1(s: f64) -> (f64, f64) {
    if s.abs() < 1.0 {
        let q = 1.0 - s * s;
        ((-1.0 / q).exp(), -2.0 * s / (q * q))
    } else {
        (0.0, 0.0)
    }
}

/// A compactly supported `C^∞` product bump on phase space, with analytic
/// gradient, for exercising the duality and resolvent identities.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothBump {
    pub center: PhasePoint,
    pub radius_x: f64,
    pub radius_v: f64,
    pub amplitude: f64,
}

impl SmoothBump {
    pub fn new(center: PhasePoint, radius_x: f64, radius_v: f64) -> Self {
        Self {
            center,
            radius_x,
            radius_v,
            amplitude: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn support(&self) -> PhaseWindow {
        PhaseWindow {
            x: Rect {
                lo: self.center.x.iter().map(|c| c - self.radius_x).collect(),
                hi: self.center.x.iter().map(|c| c + self.radius_x).collect(),
            },
            v: Rect {
                lo: self.center.v.iter().map(|c| c - self.radius_v).collect(),
                hi: self.center.v.iter().map(|c| c + self.radius_v).collect(),
            },
        }
    }

    pub fn eval(&self, x: &[f64], v: &[f64]) -> f64 {
        let mut value = self.amplitude;
        for (xi, ci) in x.iter().zip(&self.center.x) {
            value *= bump1((xi - ci) / self.radius_x).0;
        }
        for (vi, ci) in v.iter().zip(&self.center.v) {
            value *= bump1((vi - ci) / self.radius_v).0;
        }
        value
    }

    /// Writes `∇_x f` and `∇_v f`.
    pub fn gradient(&self, x: &[f64], v: &[f64], gx: &mut [f64], gv: &mut [f64]) {
        let f = self.eval(x, v);
        for (i, (xi, ci)) in x.iter().zip(&self.center.x).enumerate() {
            gx[i] = f * bump1((xi - ci) / self.radius_x).1 / self.radius_x;
        }
        for (i, (vi, ci)) in v.iter().zip(&self.center.v).enumerate() {
            gv[i] = f * bump1((vi - ci) / self.radius_v).1 / self.radius_v;
        }
    }

    /// `v·∇_x f + F·∇_v f`.
    pub fn transport_derivative_at(&self, field: &dyn ForceField, x: &[f64], v: &[f64]) -> f64 {
        let d = self.dim();
        let mut gx = vec![0.0; d];
        let mut gv = vec![0.0; d];
        let mut force = vec![0.0; d];
        self.gradient(x, v, &mut gx, &mut gv);
        field.eval(x, v, &mut force);
        (0..d).map(|i| v[i] * gx[i] + force[i] * gv[i]).sum()
    }

    pub fn to_initial_data(&self) -> InitialData {
        let b = self.clone();
        InitialData::new(self.support(), move |x, v| b.eval(x, v))
            .with_sup_bound(self.amplitude.abs() * (-1.0f64).exp().powi(2 * self.dim() as i32))
    }

    pub fn sample(&self, grid: &PhaseGrid) -> Result<PhaseGridFunction> {
        check_dim(self.dim(), grid.dim())?;
        PhaseGridFunction::sample(grid.clone(), |x, v| self.eval(x, v))
    }

    pub fn sample_transport_derivative(
        &self,
        field: &dyn ForceField,
        grid: &PhaseGrid,
    ) -> Result<PhaseGridFunction> {
        check_dim(self.dim(), grid.dim())?;
        PhaseGridFunction::sample(grid.clone(), |x, v| {
            self.transport_derivative_at(field, x, v)
        })
    }
}

fn check_setup(field: &dyn ForceField, grid: &PhaseGrid, data_dim: usize) -> Result<()> {
    check_dim(field.dim(), grid.dim())?;
    check_dim(field.dim(), data_dim)
}

/// `f(t, ·) = f⁰ ∘ Z(-t)` sampled on `grid`.
pub fn solve_cauchy(
    field: &dyn ForceField,
    f0: &InitialData,
    t: f64,
    grid: &PhaseGrid,
    cfg: &IntegratorConfig,
) -> Result<PhaseGridFunction> {
    check_setup(field, grid, f0.dim())?;
    let map = FlowMap::new(field, -t, cfg)?;
    let values = fill_fibers(grid, |_, _, z| {
        map.apply(z)?;
        Ok(f0.eval_state(z))
    })?;
    PhaseGridFunction::new(grid.clone(), values)
}

/// Backward feet `Z(-s; node)` for every grid node, advanced in time
/// through the group property `Z(-s-δ) = Z(-δ) ∘ Z(-s)`.
pub(crate) struct Feet {
    d: usize,
    states: Vec<f64>,
    elapsed: f64,
}

impl Feet {
    pub(crate) fn at_nodes(grid: &PhaseGrid) -> Self {
        let d = grid.dim();
        let states = fill_states(grid);
        Self {
            d,
            states,
            elapsed: 0.0,
        }
    }

    /// Moves every foot further back by `delta ≥ 0`.
    pub(crate) fn advance(
        &mut self,
        field: &dyn ForceField,
        delta: f64,
        cfg: &IntegratorConfig,
    ) -> Result<()> {
        if delta == 0.0 {
            return Ok(());
        }
        let map = FlowMap::new(field, -delta, cfg)?;
        self.states
            .par_chunks_mut(2 * self.d)
            .try_for_each(|z| map.apply(z))?;
        self.elapsed += delta;
        Ok(())
    }

    /// Evaluates `f⁰` at every foot.
    pub(crate) fn evaluate(&self, f0: &InitialData) -> Vec<f64> {
        self.states
            .par_chunks(2 * self.d)
            .map(|z| f0.eval_state(z))
            .collect()
    }
}

fn fill_states(grid: &PhaseGrid) -> Vec<f64> {
    let d = grid.dim();
    let xg = grid.x_grid();
    let vg = grid.v_grid();
    let nv = grid.n_v_nodes();
    let mut states = vec![0.0; 2 * d * grid.len()];
    states
        .par_chunks_mut(2 * d * nv)
        .enumerate()
        .for_each(|(ix, chunk)| {
            let mut x = vec![0.0; d];
            xg.node(ix, &mut x);
            for (iv, z) in chunk.chunks_exact_mut(2 * d).enumerate() {
                z[..d].copy_from_slice(&x);
                vg.node(iv, &mut z[d..]);
            }
        });
    states
}

/// Solutions at each of the nondecreasing nonnegative `times`.
pub fn solve_cauchy_series(
    field: &dyn ForceField,
    f0: &InitialData,
    times: &[f64],
    grid: &PhaseGrid,
    cfg: &IntegratorConfig,
) -> Result<Vec<PhaseGridFunction>> {
    check_setup(field, grid, f0.dim())?;
    let mut feet = Feet::at_nodes(grid);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t < feet.elapsed {
            return config("series times must be nondecreasing and nonnegative");
        }
        feet.advance(field, t - feet.elapsed, cfg)?;
        out.push(PhaseGridFunction::new(grid.clone(), feet.evaluate(f0))?);
    }
    Ok(out)
}

/// Truncation horizon and quadrature step of a resolvent evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolventPlan {
    pub lambda: f64,
    pub tail_tol: f64,
    /// `sup |g|` used for sizing.
    pub sup_g: f64,
    /// `S` with `sup|g|·e^{-λS}/λ = tail_tol/2`.
    pub horizon: f64,
    pub quad_step: f64,
    pub n_steps: usize,
}

impl ResolventPlan {
    /// Splits the error budget evenly: the tail beyond `S` and the
    /// trapezoid bias on the `e^{-λs}` envelope are each `≤ tail_tol / 2`.
    pub fn new(lambda: f64, sup_g: f64, tail_tol: f64, max_step: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return config(format!("resolvent needs lambda > 0, got {lambda}"));
        }
        if !(tail_tol > 0.0) {
            return config("tail_tol must be positive");
        }
        let horizon = if sup_g > 0.0 {
            ((2.0 * sup_g / (tail_tol * lambda)).ln() / lambda).max(0.0)
        } else {
            0.0
        };
        let target = (6.0 * tail_tol / (lambda * sup_g.max(1.0)))
            .sqrt()
            .min(max_step);
        let n_steps = if horizon > 0.0 {
            (horizon / target).ceil() as usize
        } else {
            0
        };
        let quad_step = if n_steps > 0 {
            horizon / n_steps as f64
        } else {
            0.0
        };
        Ok(Self {
            lambda,
            tail_tol,
            sup_g,
            horizon,
            quad_step,
            n_steps,
        })
    }

    /// Trapezoid weights times `e^{-λ s_k}`.
    fn weights(&self) -> Vec<f64> {
        (0..=self.n_steps)
            .map(|k| {
                let end = k == 0 || k == self.n_steps;
                let w = if end { 0.5 } else { 1.0 } * self.quad_step;
                w * (-self.lambda * k as f64 * self.quad_step).exp()
            })
            .collect()
    }
}

/// `R_λ g(x, v) = ∫₀^∞ e^{-λs} g(Z(-s; x, v)) ds` at every grid node.
pub fn resolvent(
    field: &dyn ForceField,
    g: &InitialData,
    lambda: f64,
    grid: &PhaseGrid,
    cfg: &IntegratorConfig,
    tail_tol: f64,
) -> Result<PhaseGridFunction> {
    let mut out = resolvent_many(field, std::slice::from_ref(g), lambda, grid, cfg, tail_tol)?;
    Ok(out.remove(0))
}

/// Resolvents of several sources sharing one set of trajectories.
pub fn resolvent_many(
    field: &dyn ForceField,
    sources: &[InitialData],
    lambda: f64,
    grid: &PhaseGrid,
    cfg: &IntegratorConfig,
    tail_tol: f64,
) -> Result<Vec<PhaseGridFunction>> {
    for g in sources {
        check_setup(field, grid, g.dim())?;
    }
    let m = sources.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let sup_g = sources
        .iter()
        .map(|g| g.sup_bound().unwrap_or_else(|| sampled_sup(g, grid)))
        .fold(0.0, f64::max);
    let plan = ResolventPlan::new(lambda, sup_g, tail_tol, cfg.step)?;
    let weights = plan.weights();
    let map = FlowMap::new(field, -plan.quad_step, cfg)?;

    let d = grid.dim();
    let nv = grid.n_v_nodes();
    let xg = grid.x_grid();
    let vg = grid.v_grid();
    // node-major, source-minor
    let mut acc = vec![0.0; grid.len() * m];
    acc.par_chunks_mut(nv * m)
        .enumerate()
        .try_for_each(|(ix, chunk)| -> Result<()> {
            let mut z = vec![0.0; 2 * d];
            for (iv, node_acc) in chunk.chunks_exact_mut(m).enumerate() {
                xg.node(ix, &mut z[..d]);
                vg.node(iv, &mut z[d..]);
                for (k, w) in weights.iter().enumerate() {
                    if k > 0 {
                        map.apply(&mut z)?;
                    }
                    for (a, g) in node_acc.iter_mut().zip(sources) {
                        *a += w * g.eval_state(&z);
                    }
                }
            }
            Ok(())
        })?;
    (0..m)
        .map(|j| {
            PhaseGridFunction::new(
                grid.clone(),
                acc.iter().skip(j).step_by(m).copied().collect(),
            )
        })
        .collect()
}

fn sampled_sup(g: &InitialData, grid: &PhaseGrid) -> f64 {
    fill_fibers(grid, |x, v, _| Ok(g.eval(x, v).abs()))
        .map(|vals| vals.into_iter().fold(0.0, f64::max))
        .unwrap_or(0.0)
}

/// `ρ(x) = Σ_v f(x, v) Ψ(v) Δv`.
pub fn velocity_moment(f: &PhaseGridFunction, psi: &TestFunction) -> XGridFunction {
    let grid = f.grid();
    let vg = grid.v_grid();
    let mut v = vec![0.0; grid.dim()];
    let weights: Vec<f64> = (0..grid.n_v_nodes())
        .map(|iv| {
            vg.node(iv, &mut v);
            psi.eval(&v) * grid.cell_volume_v()
        })
        .collect();
    let values = f
        .fibers()
        .map(|fiber| fiber.iter().zip(&weights).map(|(a, w)| a * w).sum())
        .collect();
    XGridFunction {
        grid: grid.x_grid(),
        values,
    }
}

/// Central-difference approximation of `v·∇_x f + F·∇_v f` on the grid,
/// with `f` extended by zero outside the window.
pub fn transport_derivative_fd(
    field: &dyn ForceField,
    f: &PhaseGridFunction,
) -> Result<PhaseGridFunction> {
    let grid = f.grid();
    check_dim(field.dim(), grid.dim())?;
    let d = grid.dim();
    let (xg, vg) = (grid.x_grid(), grid.v_grid());
    let (hx, hv) = (xg.spacing(), vg.spacing());
    let nv_nodes = grid.n_v_nodes();
    let values = f.values();
    let out = fill_fibers(grid, |x, v, _| {
        let ix = xg.locate(x).expect("node inside window");
        let iv = vg.locate(v).expect("node inside window");
        let mut xi = vec![0usize; d];
        let mut vi = vec![0usize; d];
        xg.multi_index(ix, &mut xi);
        vg.multi_index(iv, &mut vi);
        let mut force = vec![0.0; d];
        field.eval(x, v, &mut force);
        let at =
            |xi: &[usize], vi: &[usize]| values[xg.flat_index(xi) * nv_nodes + vg.flat_index(vi)];
        let mut acc = 0.0;
        for a in 0..d {
            let mut dx = 0.0;
            let mut p = xi.clone();
            if xi[a] + 1 < grid.nx {
                p[a] = xi[a] + 1;
                dx += at(&p, &vi);
            }
            if xi[a] > 0 {
                p[a] = xi[a] - 1;
                dx -= at(&p, &vi);
            }
            acc += v[a] * dx / (2.0 * hx[a]);

            let mut dv = 0.0;
            let mut q = vi.clone();
            if vi[a] + 1 < grid.nv {
                q[a] = vi[a] + 1;
                dv += at(&xi, &q);
            }
            if vi[a] > 0 {
                q[a] = vi[a] - 1;
                dv -= at(&xi, &q);
            }
            acc += force[a] * dv / (2.0 * hv[a]);
        }
        Ok(acc)
    })?;
    PhaseGridFunction::new(grid.clone(), out)
}

/// Terms of the Green identity
/// `∬fΦ⁰ = ∬fΦ(t) − ∫₀ᵗ∬Φ(s)(v·∇_x f + F·∇_v f)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualityReport {
    pub t: f64,
    pub n_slices: usize,
    /// `∬ f Φ⁰`.
    pub lhs: f64,
    /// `∬ f Φ(t)`.
    pub final_pairing: f64,
    /// `∫₀ᵗ ∬ Φ(s) df`, composite trapezoid in time.
    pub correction: f64,
    pub rhs: f64,
    pub residual: f64,
}

fn pairing(a: &[f64], b: &[f64], cell: f64) -> f64 {
    // fiberwise partial sums keep the reduction order fixed
    a.chunks(4096)
        .zip(b.chunks(4096))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        * cell
}

/// Checks the Green identity on `f`'s grid with `n_slices` time slices.
///
/// `f` must vanish on the outermost layer of grid nodes.
pub fn duality_check(
    field: &dyn ForceField,
    f: &PhaseGridFunction,
    df: &PhaseGridFunction,
    phi0: &InitialData,
    t: f64,
    n_slices: usize,
    cfg: &IntegratorConfig,
) -> Result<DualityReport> {
    let grid = f.grid();
    check_setup(field, grid, phi0.dim())?;
    if df.grid() != grid {
        return config("f and its transport derivative must share a grid");
    }
    if !(t >= 0.0) {
        return config("duality time must be nonnegative");
    }
    if n_slices == 0 {
        return config("need at least one time slice");
    }
    if !vanishes_on_boundary(f) {
        return config("f must be compactly supported strictly inside the grid window");
    }
    green_terms(field, f, df, phi0, t, n_slices, cfg)
}

/// The terms of the Green identity without the support check.
pub(crate) fn green_terms(
    field: &dyn ForceField,
    f: &PhaseGridFunction,
    df: &PhaseGridFunction,
    phi0: &InitialData,
    t: f64,
    n_slices: usize,
    cfg: &IntegratorConfig,
) -> Result<DualityReport> {
    let grid = f.grid();
    let cell = grid.cell_volume();
    let mut feet = Feet::at_nodes(grid);
    let phi = feet.evaluate(phi0);
    let lhs = pairing(f.values(), &phi, cell);
    if t == 0.0 {
        return Ok(DualityReport {
            t,
            n_slices,
            lhs,
            final_pairing: lhs,
            correction: 0.0,
            rhs: lhs,
            residual: 0.0,
        });
    }
    let ds = t / n_slices as f64;
    let mut correction = 0.5 * pairing(df.values(), &phi, cell);
    let mut final_pairing = 0.0;
    for k in 1..=n_slices {
        feet.advance(field, ds, cfg)?;
        let phi = feet.evaluate(phi0);
        let p = pairing(df.values(), &phi, cell);
        correction += if k == n_slices { 0.5 * p } else { p };
        if k == n_slices {
            final_pairing = pairing(f.values(), &phi, cell);
        }
    }
    correction *= ds;
    let rhs = final_pairing - correction;
    Ok(DualityReport {
        t,
        n_slices,
        lhs,
        final_pairing,
        correction,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

fn vanishes_on_boundary(f: &PhaseGridFunction) -> bool {
    let grid = f.grid();
    let d = grid.dim();
    let (xg, vg) = (grid.x_grid(), grid.v_grid());
    let mut xi = vec![0usize; d];
    let mut vi = vec![0usize; d];
    let on_edge = |idx: &[usize], n: usize| idx.iter().any(|&i| i == 0 || i + 1 == n);
    f.fibers().enumerate().all(|(ix, fiber)| {
        xg.multi_index(ix, &mut xi);
        let x_edge = on_edge(&xi, grid.nx);
        fiber.iter().enumerate().all(|(iv, &val)| {
            if val == 0.0 {
                return true;
            }
            if x_edge {
                return false;
            }
            vg.multi_index(iv, &mut vi);
            !on_edge(&vi, grid.nv)
        })
    })
}

/// Discrete `H^s` norm of `ρ` on its grid treated as a torus:
/// `(Σ_ξ (1+|ξ|²)^s |ρ̂(ξ)|²)^{1/2}` with Plancherel-normalized `ρ̂` and
/// `ξ = 2πk/L`.
pub fn sobolev_seminorm(rho: &XGridFunction, s: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return config(format!("Sobolev exponent must lie in (0, 1), got {s}"));
    }
    let grid = &rho.grid;
    let d = grid.dim();
    let n = grid.n;
    let mut data: Vec<Complex<f64>> = rho.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for axis in 0..d {
        let stride = n.pow((d - 1 - axis) as u32);
        for base in 0..data.len() {
            // each line starts at an index whose `axis` digit is zero
            if (base / stride) % n != 0 {
                continue;
            }
            for (k, c) in line.iter_mut().enumerate() {
                *c = data[base + k * stride];
            }
            fft.process(&mut line);
            for (k, c) in line.iter().enumerate() {
                data[base + k * stride] = *c;
            }
        }
    }
    let lengths = grid.window.lengths();
    let scale = grid.cell_volume() / grid.window.volume().sqrt();
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    for (k, c) in data.iter().enumerate() {
        grid.multi_index(k, &mut idx);
        let xi2: f64 = idx
            .iter()
            .zip(&lengths)
            .map(|(&i, l)| {
                let signed = if i <= n / 2 {
                    i as f64
                } else {
                    i as f64 - n as f64
                };
                let xi = 2.0 * std::f64::consts::PI * signed / l;
                xi * xi
            })
            .sum();
        total += (1.0 + xi2).powf(s) * (c.norm_sqr() * scale * scale);
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_builtin, BuiltinKind};

    fn grid1(lo: f64, hi: f64, n: usize) -> PhaseGrid {
        PhaseGrid::new(PhaseWindow::cube(1, lo, hi).unwrap(), n, n).unwrap()
    }

    fn unit_indicator(d: usize) -> InitialData {
        InitialData::indicator(PhaseWindow::cube(d, 0.0, 1.0).unwrap())
    }

    #[test]
    fn free_transport_shears() {
        let f = make_builtin(BuiltinKind::Zero, 1, &[]).unwrap();
        let f0 = InitialData::new(PhaseWindow::unbounded(1), |x, v| {
            (-(x[0] - 0.3).powi(2)).exp() * (1.0 + v[0])
        });
        let g = grid1(-2.0, 2.0, 16);
        let t = 0.7;
        let sol = solve_cauchy(&f, &f0, t, &g, &IntegratorConfig::default()).unwrap();
        let exact =
            PhaseGridFunction::sample(g.clone(), |x, v| f0.eval(&[x[0] - t * v[0]], v)).unwrap();
        let err = sol
            .values()
            .iter()
            .zip(exact.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-12);
        let at0 = solve_cauchy(&f, &f0, 0.0, &g, &IntegratorConfig::default()).unwrap();
        let sampled = PhaseGridFunction::sample(g, |x, v| f0.eval(x, v)).unwrap();
        assert_eq!(at0, sampled);
    }

    #[test]
    fn harmonic_quarter_turn_of_indicator() {
        let h = make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap();
        let g = grid1(-1.5, 1.5, 30);
        let t = std::f64::consts::FRAC_PI_2;
        let sol =
            solve_cauchy(&h, &unit_indicator(1), t, &g, &IntegratorConfig::default()).unwrap();
        // f(t, x, v) = 1{x ∈ [0,1], -v ∈ [0,1]}; nodes sit 0.05 away from the edges
        let expect = PhaseGridFunction::sample(g, |x, v| {
            ((0.0..=1.0).contains(&x[0]) && (0.0..=1.0).contains(&-v[0])) as u8 as f64
        })
        .unwrap();
        assert_eq!(sol, expect);
    }

    #[test]
    fn resolvent_of_constant_and_zero() {
        let h = make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap();
        let g = grid1(-1.0, 1.0, 4);
        let one = InitialData::constant(PhaseWindow::cube(1, -10.0, 10.0).unwrap(), 1.0);
        let r = resolvent(&h, &one, 2.0, &g, &IntegratorConfig::default(), 1e-8).unwrap();
        for v in r.values() {
            assert!((v - 0.5).abs() <= 1e-8, "{v}");
        }
        let zero = InitialData::constant(PhaseWindow::cube(1, -10.0, 10.0).unwrap(), 0.0);
        let r = resolvent(&h, &zero, 2.0, &g, &IntegratorConfig::default(), 1e-8).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
        assert!(resolvent(&h, &one, 0.0, &g, &IntegratorConfig::default(), 1e-8).is_err());
        assert!(resolvent(&h, &one, -1.0, &g, &IntegratorConfig::default(), 1e-8).is_err());
    }

    #[test]
    fn resolvent_plan_budget() {
        let p = ResolventPlan::new(2.0, 1.0, 1e-8, 1e-3).unwrap();
        // tail: e^{-λS}/λ = tol/2
        assert!(((-2.0 * p.horizon).exp() / 2.0 - 0.5e-8).abs() < 1e-15);
        // trapezoid bias on the envelope: λ h² / 12 ≤ tol/2
        assert!(2.0 * p.quad_step * p.quad_step / 12.0 <= 0.5e-8 * (1.0 + 1e-9));
    }

    #[test]
    fn moments() {
        let g = PhaseGrid::new(
            PhaseWindow::new(
                Rect::cube(1, -2.0, 2.0).unwrap(),
                Rect::cube(1, -1.5, 1.5).unwrap(),
            )
            .unwrap(),
            8,
            300,
        )
        .unwrap();
        let f = PhaseGridFunction::sample(g.clone(), |x, v| {
            (-x[0] * x[0]).exp() * (v[0].abs() <= 1.0) as u8 as f64
        })
        .unwrap();
        let rho = velocity_moment(&f, &TestFunction::ball_indicator(1.0));
        let mut x = [0.0];
        for (k, r) in rho.values.iter().enumerate() {
            rho.grid.node(k, &mut x);
            assert!((r - 2.0 * (-x[0] * x[0]).exp()).abs() <= 2.0 * 0.01 + 1e-12);
        }
        let zero = PhaseGridFunction::zeros(g);
        assert!(velocity_moment(&zero, &TestFunction::bump(1.0))
            .values
            .iter()
            .all(|&r| r == 0.0));

        let g = grid1(-0.5, 1.5, 200);
        let ind = PhaseGridFunction::sample(g, |x, v| {
            ((0.0..=1.0).contains(&x[0]) && (0.0..=1.0).contains(&v[0])) as u8 as f64
        })
        .unwrap();
        let psi = TestFunction::new(10.0, |v| v[0], |_, out| out[0] = 1.0);
        let rho = velocity_moment(&ind, &psi);
        for (k, r) in rho.values.iter().enumerate() {
            rho.grid.node(k, &mut x);
            let expect = if (0.0..=1.0).contains(&x[0]) {
                0.5
            } else {
                0.0
            };
            assert!((r - expect).abs() <= 0.01 + 1e-12);
        }
    }

    #[test]
    fn bump_test_function_gradient() {
        let psi = TestFunction::bump(1.5);
        let v = [0.4, -0.7];
        let mut g = [0.0; 2];
        psi.grad(&v, &mut g);
        let h = 1e-6;
        for i in 0..2 {
            let mut p = v;
            let mut m = v;
            p[i] += h;
            m[i] -= h;
            let fd = (psi.eval(&p) - psi.eval(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert_eq!(psi.eval(&[1.5, 0.1]), 0.0);
    }

    #[test]
    fn smooth_bump_gradient() {
        let b = SmoothBump::new(PhasePoint::new(vec![0.1], vec![-0.2]).unwrap(), 0.8, 0.6);
        let (x, v) = ([0.3], [0.1]);
        let (mut gx, mut gv) = ([0.0], [0.0]);
        b.gradient(&x, &v, &mut gx, &mut gv);
        let h = 1e-6;
        let fdx = (b.eval(&[x[0] + h], &v) - b.eval(&[x[0] - h], &v)) / (2.0 * h);
        let fdv = (b.eval(&x, &[v[0] + h]) - b.eval(&x, &[v[0] - h])) / (2.0 * h);
        assert!((fdx - gx[0]).abs() < 1e-8 && (fdv - gv[0]).abs() < 1e-8);
    }

    #[test]
    fn duality_trivial_cases() {
        let z = make_builtin(BuiltinKind::Zero, 1, &[]).unwrap();
        let g = grid1(-2.0, 2.0, 32);
        let bump = SmoothBump::new(PhasePoint::new(vec![0.0], vec![0.0]).unwrap(), 1.0, 1.0);
        let f = bump.sample(&g).unwrap();
        let df = bump.sample_transport_derivative(&z, &g).unwrap();
        let phi0 = InitialData::new(PhaseWindow::unbounded(1), |x, v| (x[0] + v[0]).cos());
        let r = duality_check(&z, &f, &df, &phi0, 0.0, 8, &IntegratorConfig::default()).unwrap();
        assert_eq!(r.residual, 0.0);
        let zero = PhaseGridFunction::zeros(g.clone());
        let r = duality_check(
            &z,
            &zero,
            &zero,
            &phi0,
            0.5,
            8,
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(r.residual, 0.0);
        // support touching the boundary is rejected
        let wide = PhaseGridFunction::sample(g, |_, _| 1.0).unwrap();
        assert!(duality_check(
            &z,
            &wide,
            &wide,
            &phi0,
            0.5,
            8,
            &IntegratorConfig::default()
        )
        .is_err());
    }

    #[test]
    fn sobolev_examples() {
        use crate::grid::XGrid;
        let g = XGrid::new(Rect::cube(1, 0.0, 1.0).unwrap(), 64).unwrap();
        let c = XGridFunction::sample(g.clone(), |_| 3.0);
        assert!((sobolev_seminorm(&c, 0.25).unwrap() - c.l2_norm()).abs() < 1e-12);
        let z = XGridFunction::sample(g.clone(), |_| 0.0);
        assert_eq!(sobolev_seminorm(&z, 0.5).unwrap(), 0.0);
        let cosine = XGridFunction::sample(g, |x| (2.0 * std::f64::consts::PI * x[0]).cos());
        let expect = (1.0 + 4.0 * std::f64::consts::PI.powi(2)).powf(0.125) * cosine.l2_norm();
        assert!((sobolev_seminorm(&cosine, 0.25).unwrap() - expect).abs() < 1e-12);
        assert!(sobolev_seminorm(&cosine, 1.0).is_err());
    }

    #[test]
    fn sobolev_two_dimensional_mode() {
        use crate::grid::XGrid;
        let g = XGrid::new(Rect::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap(), 16).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let rho = XGridFunction::sample(g, |x| (two_pi * x[0]).sin() * (two_pi * x[1] / 2.0).cos());
        let xi2 = two_pi * two_pi * (1.0 + 0.25);
        let expect = (1.0 + xi2).powf(0.3) * rho.l2_norm();
        assert!((sobolev_seminorm(&rho, 0.6).unwrap() - expect).abs() < 1e-10);
    }
}
