//! Characteristics of `x' = v, v' = F(x, v)` by fixed-step classical RK4.
//!
//! Backward characteristics are the same ODE integrated with negative time.
//! Besides the plain flow this module integrates the variational block
//! `(∂_{v₀}X, ∂_{v₀}V)` and the full `2d × 2d` monodromy matrix, and
//! provides [`FlowMap`], a reusable time-`t` map that is evaluated through
//! an exact RK4 propagator matrix when the field is linear.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Error, Result};
use crate::fields::ForceField;
use crate::geometry::PhaseWindow;
use crate::linalg::det_lu;

/// A point `(x, v)` of phase space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_dim(x.len(), v.len())?;
        if x.iter().chain(&v).any(|c| !c.is_finite()) {
            return config("phase point coordinates must be finite");
        }
        Ok(Self { x, v })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Concatenated `(x, v)`.
    pub fn to_state(&self) -> Vec<f64> {
        let mut z = self.x.clone();
        z.extend_from_slice(&self.v);
        z
    }

    pub fn from_state(z: &[f64]) -> Self {
        let d = z.len() / 2;
        Self {
            x: z[..d].to_vec(),
            v: z[d..2 * d].to_vec(),
        }
    }

    /// Euclidean distance of the concatenated coordinates.
    pub fn distance(&self, other: &PhasePoint) -> f64 {
        self.x
            .iter()
            .chain(&self.v)
            .zip(other.x.iter().chain(&other.v))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A phase point with its velocity-sensitivity block.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub z: PhasePoint,
    /// `∂_{v₀} X(t)`.
    pub jx: DMatrix<f64>,
    /// `∂_{v₀} V(t)`.
    pub jv: DMatrix<f64>,
}

impl VariationalState {
    /// `jx = 0`, `jv = I`.
    pub fn initial(z: PhasePoint) -> Self {
        let d = z.dim();
        Self {
            z,
            jx: DMatrix::zeros(d, d),
            jv: DMatrix::identity(d, d),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    /// Maximal step; the actual step is `t / ceil(|t| / step)`.
    pub step: f64,
    pub scheme: Scheme,
    pub max_time: f64,
    /// Trajectories leaving this window raise [`Error::Escape`].
    pub safety: Option<PhaseWindow>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            scheme: Scheme::Rk4,
            max_time: 1e3,
            safety: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return config(format!(
                "integrator step must be positive, got {}",
                self.step
            ));
        }
        if !(self.max_time > 0.0) {
            return config("max_time must be positive");
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        self.validate()?;
        if !t.is_finite() || t.abs() > self.max_time {
            return config(format!(
                "|t| = {} exceeds max_time = {}",
                t.abs(),
                self.max_time
            ));
        }
        Ok(())
    }

    /// Number of steps and signed step size used to reach time `t`.
    pub fn steps_for(&self, t: f64) -> (usize, f64) {
        if t == 0.0 {
            return (0, 0.0);
        }
        let n = ((t.abs() / self.step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        (n, t / n as f64)
    }
}

/// Classical RK4 with reusable stage buffers.
struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, rhs: &mut impl FnMut(&[f64], &mut [f64]), y: &mut [f64], h: f64) {
        let n = y.len();
        rhs(y, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k1[i];
        }
        rhs(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k2[i];
        }
        rhs(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = y[i] + h * self.k3[i];
        }
        rhs(&self.tmp, &mut self.k4);
        for i in 0..n {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Integrates an augmented state whose first `2d` entries are `(x, v)`,
/// checking the safety window after every step.
fn march(
    y: &mut [f64],
    d: usize,
    t: f64,
    cfg: &IntegratorConfig,
    mut rhs: impl FnMut(&[f64], &mut [f64]),
) -> Result<()> {
    let (n, dt) = cfg.steps_for(t);
    let mut rk = Rk4::new(y.len());
    for k in 1..=n {
        rk.step(&mut rhs, y, dt);
        if let Some(w) = &cfg.safety {
            if !w.contains_state(&y[..2 * d]) {
                return Err(Error::Escape {
                    time: k as f64 * dt,
                });
            }
        }
    }
    Ok(())
}

fn characteristic_rhs<'a>(field: &'a dyn ForceField) -> impl FnMut(&[f64], &mut [f64]) + 'a {
    let d = field.dim();
    move |y, dy| {
        dy[..d].copy_from_slice(&y[d..2 * d]);
        field.eval(&y[..d], &y[d..2 * d], &mut dy[d..2 * d]);
    }
}

fn check_point(field: &dyn ForceField, z0: &PhasePoint) -> Result<usize> {
    let d = field.dim();
    check_dim(d, z0.x.len())?;
    check_dim(d, z0.v.len())?;
    Ok(d)
}

/// `Z(t; x₀, v₀)`; negative `t` follows the characteristic backward.
pub fn integrate_flow(
    field: &dyn ForceField,
    z0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<PhasePoint> {
    let d = check_point(field, z0)?;
    cfg.check_time(t)?;
    let mut y = z0.to_state();
    march(&mut y, d, t, cfg, characteristic_rhs(field))?;
    Ok(PhasePoint::from_state(&y))
}

/// Samples a trajectory at `samples + 1` evenly spaced instants from 0 to `t`.
pub fn sample_trajectory(
    field: &dyn ForceField,
    z0: &PhasePoint,
    t: f64,
    samples: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<(f64, PhasePoint)>> {
    let d = check_point(field, z0)?;
    cfg.check_time(t)?;
    let samples = samples.max(1);
    let mut y = z0.to_state();
    let mut out = vec![(0.0, z0.clone())];
    let dt = t / samples as f64;
    for k in 1..=samples {
        let elapsed = (k - 1) as f64 * dt;
        march(&mut y, d, dt, cfg, characteristic_rhs(field)).map_err(|e| match e {
            Error::Escape { time } => Error::Escape {
                time: elapsed + time,
            },
            e => e,
        })?;
        out.push((k as f64 * dt, PhasePoint::from_state(&y)));
    }
    Ok(out)
}

fn variational_rhs<'a>(field: &'a dyn ForceField) -> impl FnMut(&[f64], &mut [f64]) + 'a {
    let d = field.dim();
    let dd = d * d;
    let with_v = field.velocity_dependent();
    let mut jac_x = vec![0.0; dd];
    let mut jac_v = vec![0.0; dd];
    move |y, dy| {
        let (x, v) = (&y[..d], &y[d..2 * d]);
        dy[..d].copy_from_slice(v);
        field.eval(x, v, &mut dy[d..2 * d]);
        let jx = &y[2 * d..2 * d + dd];
        let jv = &y[2 * d + dd..2 * d + 2 * dd];
        dy[2 * d..2 * d + dd].copy_from_slice(jv);
        field.jacobian_x(x, v, &mut jac_x);
        if with_v {
            field.jacobian_v(x, v, &mut jac_v);
        }
        let djv = &mut dy[2 * d + dd..];
        for i in 0..d {
            for k in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += jac_x[i * d + j] * jx[j * d + k];
                    if with_v {
                        acc += jac_v[i * d + j] * jv[j * d + k];
                    }
                }
                djv[i * d + k] = acc;
            }
        }
    }
}

fn variational_state(y: &[f64], d: usize) -> VariationalState {
    let dd = d * d;
    VariationalState {
        z: PhasePoint::from_state(&y[..2 * d]),
        jx: DMatrix::from_row_slice(d, d, &y[2 * d..2 * d + dd]),
        jv: DMatrix::from_row_slice(d, d, &y[2 * d + dd..2 * d + 2 * dd]),
    }
}

fn initial_variational(z0: &PhasePoint) -> Vec<f64> {
    let d = z0.dim();
    let mut y = z0.to_state();
    y.extend(std::iter::repeat(0.0).take(d * d));
    y.extend((0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }));
    y
}

/// Integrates the flow together with `jx' = jv`,
/// `jv' = ∇_xF·jx + ∇_vF·jv`, starting from `jx = 0`, `jv = I`.
///
/// With `t < 0` the returned `jx` is `∂_v[X(-|t|; x, v)]`.
pub fn integrate_variational(
    field: &dyn ForceField,
    z0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<VariationalState> {
    let d = check_point(field, z0)?;
    cfg.check_time(t)?;
    let mut y = initial_variational(z0);
    march(&mut y, d, t, cfg, variational_rhs(field))?;
    Ok(variational_state(&y, d))
}

/// Variational states at each of `times`, which must share one sign and be
/// ordered by increasing magnitude. Integration continues from one time to
/// the next.
pub fn integrate_variational_series(
    field: &dyn ForceField,
    z0: &PhasePoint,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<VariationalState>> {
    let d = check_point(field, z0)?;
    let mut y = initial_variational(z0);
    let mut current = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        cfg.check_time(t)?;
        if t * current < 0.0 || t.abs() < current.abs() {
            return config("series times must share a sign and grow in magnitude");
        }
        march(&mut y, d, t - current, cfg, variational_rhs(field))?;
        current = t;
        out.push(variational_state(&y, d));
    }
    Ok(out)
}

/// Integrates the flow and its full `2d × 2d` derivative `∂Z(t)/∂(x₀, v₀)`.
pub fn monodromy(
    field: &dyn ForceField,
    z0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<(PhasePoint, DMatrix<f64>)> {
    let d = check_point(field, z0)?;
    cfg.check_time(t)?;
    let n = 2 * d;
    let mut y = z0.to_state();
    y.extend((0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }));
    let mut jac_x = vec![0.0; d * d];
    let mut jac_v = vec![0.0; d * d];
    let with_v = field.velocity_dependent();
    let rhs = |y: &[f64], dy: &mut [f64]| {
        let (x, v) = (&y[..d], &y[d..n]);
        dy[..d].copy_from_slice(v);
        field.eval(x, v, &mut dy[d..n]);
        field.jacobian_x(x, v, &mut jac_x);
        if with_v {
            field.jacobian_v(x, v, &mut jac_v);
        } else {
            jac_v.fill(0.0);
        }
        let m = &y[n..];
        let dm = &mut dy[n..];
        for k in 0..n {
            for i in 0..d {
                dm[i * n + k] = m[(d + i) * n + k];
                let mut acc = 0.0;
                for j in 0..d {
                    acc += jac_x[i * d + j] * m[j * n + k] + jac_v[i * d + j] * m[(d + j) * n + k];
                }
                dm[(d + i) * n + k] = acc;
            }
        }
    };
    march(&mut y, d, t, cfg, rhs)?;
    Ok((
        PhasePoint::from_state(&y[..n]),
        DMatrix::from_row_slice(n, n, &y[n..]),
    ))
}

/// Fields whose flow is known in closed form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedForm {
    Zero,
    Repulsive,
    Harmonic,
}

impl ClosedForm {
    pub fn for_builtin(kind: crate::fields::BuiltinKind) -> Option<Self> {
        use crate::fields::BuiltinKind as K;
        match kind {
            K::Zero => Some(ClosedForm::Zero),
            K::Repulsive => Some(ClosedForm::Repulsive),
            K::Harmonic => Some(ClosedForm::Harmonic),
            K::Magnetic2D | K::Magnetic3D => None,
        }
    }
}

/// Exact flow of the three linear position-only fields, componentwise.
pub fn closed_form_flow(kind: ClosedForm, z0: &PhasePoint, t: f64) -> PhasePoint {
    let (a, b, c, e) = match kind {
        // (x, v) ↦ (a x + b v, c x + e v)
        ClosedForm::Zero => (1.0, t, 0.0, 1.0),
        ClosedForm::Harmonic => (t.cos(), t.sin(), -t.sin(), t.cos()),
        ClosedForm::Repulsive => (t.cosh(), t.sinh(), t.sinh(), t.cosh()),
    };
    let x = z0.x.iter().zip(&z0.v).map(|(x, v)| a * x + b * v).collect();
    let v = z0.x.iter().zip(&z0.v).map(|(x, v)| c * x + e * v).collect();
    PhasePoint { x, v }
}

/// `|Z(t+s; z₀) − Z(t; Z(s; z₀))|`.
pub fn group_defect(
    field: &dyn ForceField,
    z0: &PhasePoint,
    t: f64,
    s: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let direct = integrate_flow(field, z0, t + s, cfg)?;
    let mid = integrate_flow(field, z0, s, cfg)?;
    let composed = integrate_flow(field, &mid, t, cfg)?;
    Ok(direct.distance(&composed))
}

/// `|det ∂Z(t)/∂(x₀, v₀) − 1|`.
pub fn volume_defect(
    field: &dyn ForceField,
    z0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let (_, m) = monodromy(field, z0, t, cfg)?;
    Ok((det_lu(&m) - 1.0).abs())
}

/// One RK4 step of `y' = L y` is multiplication by this matrix.
pub fn rk4_step_matrix(generator: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = generator.nrows();
    let a = generator * dt;
    let a2 = &a * &a;
    let a3 = &a2 * &a;
    let a4 = &a3 * &a;
    DMatrix::identity(n, n) + &a + a2 / 2.0 + a3 / 6.0 + a4 / 24.0
}

/// Generator `[[0, I], [A, B]]` of the flow of `F = A x + B v`.
pub fn linear_generator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let mut l = DMatrix::zeros(2 * d, 2 * d);
    l.view_mut((0, d), (d, d)).fill_with_identity();
    l.view_mut((d, 0), (d, d)).copy_from(a);
    l.view_mut((d, d), (d, d)).copy_from(b);
    l
}

const STACK_STATE: usize = 16;

/// The time-`t` flow map, built once and applied to many points.
///
/// For linear fields the map is the matrix `P_h^n` of `n` RK4 steps, which
/// reproduces per-point RK4 up to roundoff; the safety window is then only
/// checked at the endpoint. Other fields are integrated point by point.
pub struct FlowMap<'a> {
    field: &'a dyn ForceField,
    t: f64,
    cfg: IntegratorConfig,
    /// Row-major `2d × 2d` propagator.
    propagator: Option<Vec<f64>>,
}

impl<'a> FlowMap<'a> {
    pub fn new(field: &'a dyn ForceField, t: f64, cfg: &IntegratorConfig) -> Result<Self> {
        cfg.check_time(t)?;
        let d = field.dim();
        let propagator = field.linear_coefficients().map(|(a, b)| {
            let (n, dt) = cfg.steps_for(t);
            let step = rk4_step_matrix(&linear_generator(&a, &b), dt);
            let p = step.pow(n as u32);
            let mut rows = Vec::with_capacity(4 * d * d);
            for i in 0..2 * d {
                rows.extend(p.row(i).iter().copied());
            }
            rows
        });
        Ok(Self {
            field,
            t,
            cfg: cfg.clone(),
            propagator,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn is_linear(&self) -> bool {
        self.propagator.is_some()
    }

    /// Maps the concatenated state `z = (x, v)` in place.
    pub fn apply(&self, z: &mut [f64]) -> Result<()> {
        let d = self.field.dim();
        let n = 2 * d;
        debug_assert_eq!(z.len(), n);
        match &self.propagator {
            Some(p) => {
                if n <= STACK_STATE {
                    let mut out = [0.0; STACK_STATE];
                    matvec(p, z, &mut out[..n]);
                    z.copy_from_slice(&out[..n]);
                } else {
                    let mut out = vec![0.0; n];
                    matvec(p, z, &mut out);
                    z.copy_from_slice(&out);
                }
                if let Some(w) = &self.cfg.safety {
                    if !w.contains_state(z) {
                        return Err(Error::Escape { time: self.t });
                    }
                }
                Ok(())
            }
            None => march(z, d, self.t, &self.cfg, characteristic_rhs(self.field)),
        }
    }
}

fn matvec(p: &[f64], z: &[f64], out: &mut [f64]) {
    let n = z.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = p[i * n..(i + 1) * n]
            .iter()
            .zip(z)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// Reads initial points, one CSV row `x₁..x_d, v₁..v_d` per line. Blank
/// lines and lines starting with `#` are skipped, as is a header row made
/// of non-numeric fields.
pub fn read_points_csv(reader: impl BufRead, dim: usize) -> Result<Vec<PhasePoint>> {
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if points.is_empty() && lineno == 0 => continue,
            Err(e) => return Err(Error::Format(format!("line {}: {e}", lineno + 1))),
        };
        if values.len() != 2 * dim {
            return Err(Error::Format(format!(
                "line {}: expected {} columns, found {}",
                lineno + 1,
                2 * dim,
                values.len()
            )));
        }
        points.push(PhasePoint::new(
            values[..dim].to_vec(),
            values[dim..].to_vec(),
        )?);
    }
    Ok(points)
}

/// Writes `(t, x…, v…)` rows with a header line.
pub fn write_trajectory_csv(
    mut out: impl Write,
    dim: usize,
    trajectories: &[Vec<(f64, PhasePoint)>],
) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=dim).map(|i| format!("x{i}")));
    header.extend((1..=dim).map(|i| format!("v{i}")));
    writeln!(out, "{}", header.join(","))?;
    for traj in trajectories {
        for (t, z) in traj {
            let mut row = vec![t.to_string()];
            row.extend(z.x.iter().chain(&z.v).map(|c| c.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}
