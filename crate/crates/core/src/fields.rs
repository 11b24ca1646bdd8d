//! Force fields `F(x, v)` driving the characteristic system `x' = v, v' = F`.
//!
//! Jacobians are written row-major into caller-provided `d × d` buffers:
//! `out[i * d + j] = ∂F_i / ∂x_j` (or `∂v_j`). Fields without analytic
//! derivatives fall back to central finite differences with step
//! [`FD_STEP`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Result};
use crate::geometry::Rect;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Divergence tolerance for fields with analytic velocity Jacobians.
pub const DIV_TOL_ANALYTIC: f64 = 1e-10;

/// A force field on phase space.
///
/// Implementations must be pure: evaluation may be called concurrently from
/// many threads.
pub trait ForceField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], v: &[f64], out: &mut [f64]);

    /// `∇_x F`, row-major.
    fn jacobian_x(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        fd_jacobian(self, x, v, false, FD_STEP, out);
    }

    /// `∇_v F`, row-major. Zero for position-only fields.
    fn jacobian_v(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        if self.velocity_dependent() {
            fd_jacobian(self, x, v, true, FD_STEP, out);
        } else {
            out.fill(0.0);
        }
    }

    /// A bound `M ≥ sup ‖∇_x F‖` (max-entry norm), when one is known.
    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }

    fn velocity_dependent(&self) -> bool {
        false
    }

    /// True when both Jacobians are exact rather than finite differences.
    fn analytic_jacobians(&self) -> bool {
        false
    }

    /// For homogeneous linear fields `F = A x + B v`, the pair `(A, B)`.
    /// The flow module uses this to build exact RK4 propagators.
    fn linear_coefficients(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// Central finite-difference Jacobian of `field` in `x` (or in `v` when
/// `wrt_v` is set).
pub fn fd_jacobian<F: ForceField + ?Sized>(
    field: &F,
    x: &[f64],
    v: &[f64],
    wrt_v: bool,
    h: f64,
    out: &mut [f64],
) {
    let d = field.dim();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let shifted = |j: usize, delta: f64, out: &mut [f64]| {
        let mut xp = x.to_vec();
        let mut vp = v.to_vec();
        if wrt_v {
            vp[j] += delta;
        } else {
            xp[j] += delta;
        }
        field.eval(&xp, &vp, out);
    };
    for j in 0..d {
        shifted(j, h, &mut fp);
        shifted(j, -h, &mut fm);
        for i in 0..d {
            out[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

/// Built-in analytic fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinKind {
    /// Free transport, `F = 0`.
    Zero,
    /// `F(x) = x`, from the potential `-|x|²/2`.
    Repulsive,
    /// `F(x) = -x`, from the potential `|x|²/2`.
    Harmonic,
    /// Lorentz force in the plane, `F = (B v₂, -B v₁)`.
    #[serde(rename = "magnetic2d")]
    Magnetic2D,
    /// Lorentz force `F = v ∧ B` with a constant vector `B`.
    #[serde(rename = "magnetic3d")]
    Magnetic3D,
}

impl BuiltinKind {
    pub fn name(self) -> &'static str {
        match self {
            BuiltinKind::Zero => "zero",
            BuiltinKind::Repulsive => "repulsive",
            BuiltinKind::Harmonic => "harmonic",
            BuiltinKind::Magnetic2D => "magnetic2d",
            BuiltinKind::Magnetic3D => "magnetic3d",
        }
    }
}

/// One of the [`BuiltinKind`] fields, with exact Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltinField {
    kind: BuiltinKind,
    dim: usize,
    b: [f64; 3],
    declared_lipschitz: Option<f64>,
}

/// Builds a built-in field.
///
/// `params` is empty for `Zero`, `Repulsive` and `Harmonic`; it holds the
/// scalar `B` for `Magnetic2D` (default 1 when empty) and the three
/// components of `B` for `Magnetic3D`.
pub fn make_builtin(kind: BuiltinKind, dim: usize, params: &[f64]) -> Result<BuiltinField> {
    if dim == 0 {
        return config("field dimension must be at least 1");
    }
    let mut b = [0.0; 3];
    match kind {
        BuiltinKind::Zero | BuiltinKind::Repulsive | BuiltinKind::Harmonic => {
            if !params.is_empty() {
                return config(format!("field '{}' takes no parameters", kind.name()));
            }
        }
        BuiltinKind::Magnetic2D => {
            if dim != 2 {
                return config(format!("magnetic2d requires dim = 2, got {dim}"));
            }
            match params {
                [] => b[2] = 1.0,
                [bz] => b[2] = *bz,
                _ => return config("magnetic2d takes a single scalar B"),
            }
        }
        BuiltinKind::Magnetic3D => {
            if dim != 3 {
                return config(format!("magnetic3d requires dim = 3, got {dim}"));
            }
            match params {
                [bx, by, bz] => b = [*bx, *by, *bz],
                _ => return config("magnetic3d takes a vector B = [bx, by, bz]"),
            }
        }
    }
    if b.iter().any(|c| !c.is_finite()) {
        return config("magnetic field components must be finite");
    }
    Ok(BuiltinField {
        kind,
        dim,
        b,
        declared_lipschitz: None,
    })
}

impl BuiltinField {
    pub fn kind(&self) -> BuiltinKind {
        self.kind
    }

    /// Replaces the exact Lipschitz constant by a user-declared one. Used to
    /// exercise verifiers with a deliberately wrong `M`.
    pub fn with_declared_lipschitz(mut self, m: f64) -> Self {
        self.declared_lipschitz = Some(m);
        self
    }

    /// The magnetic vector (only meaningful for the magnetic kinds; the 2D
    /// scalar is stored as the third component).
    pub fn magnetic(&self) -> [f64; 3] {
        self.b
    }

    fn exact_lipschitz(&self) -> f64 {
        match self.kind {
            BuiltinKind::Zero | BuiltinKind::Magnetic2D | BuiltinKind::Magnetic3D => 0.0,
            BuiltinKind::Repulsive | BuiltinKind::Harmonic => 1.0,
        }
    }

    fn velocity_matrix(&self) -> DMatrix<f64> {
        let [bx, by, bz] = self.b;
        match self.kind {
            BuiltinKind::Magnetic2D => DMatrix::from_row_slice(2, 2, &[0.0, bz, -bz, 0.0]),
            BuiltinKind::Magnetic3D => {
                DMatrix::from_row_slice(3, 3, &[0.0, bz, -by, -bz, 0.0, bx, by, -bx, 0.0])
            }
            _ => DMatrix::zeros(self.dim, self.dim),
        }
    }

    fn position_matrix(&self) -> DMatrix<f64> {
        let d = self.dim;
        match self.kind {
            BuiltinKind::Repulsive => DMatrix::identity(d, d),
            BuiltinKind::Harmonic => -DMatrix::identity(d, d),
            _ => DMatrix::zeros(d, d),
        }
    }
}

impl ForceField for BuiltinField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let [bx, by, bz] = self.b;
        match self.kind {
            BuiltinKind::Zero => out.fill(0.0),
            BuiltinKind::Repulsive => out.copy_from_slice(x),
            BuiltinKind::Harmonic => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -xi;
                }
            }
            BuiltinKind::Magnetic2D => {
                out[0] = bz * v[1];
                out[1] = -bz * v[0];
            }
            BuiltinKind::Magnetic3D => {
                out[0] = v[1] * bz - v[2] * by;
                out[1] = v[2] * bx - v[0] * bz;
                out[2] = v[0] * by - v[1] * bx;
            }
        }
    }

    fn jacobian_x(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.position_matrix().transpose().as_slice());
    }

    fn jacobian_v(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        // nalgebra is column-major; the transpose's column-major storage is
        // the row-major layout of the original.
        out.copy_from_slice(self.velocity_matrix().transpose().as_slice());
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(
            self.declared_lipschitz
                .unwrap_or_else(|| self.exact_lipschitz()),
        )
    }

    fn velocity_dependent(&self) -> bool {
        matches!(self.kind, BuiltinKind::Magnetic2D | BuiltinKind::Magnetic3D)
    }

    fn analytic_jacobians(&self) -> bool {
        true
    }

    fn linear_coefficients(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.position_matrix(), self.velocity_matrix()))
    }
}

type EvalFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A field given by closures, for nonlinear or experimental forces.
///
/// ```
/// use kinetra::fields::{CustomField, ForceField};
/// let pendulum = CustomField::new(1, |x, _v, out| out[0] = -x[0].sin())
///     .with_jacobian_x(|x, _v, out| out[0] = -x[0].cos())
///     .with_lipschitz(1.0);
/// let mut f = [0.0];
/// pendulum.eval(&[0.0], &[1.0], &mut f);
/// assert_eq!(f[0], 0.0);
/// ```
pub struct CustomField {
    dim: usize,
    eval: EvalFn,
    jacobian_x: Option<EvalFn>,
    jacobian_v: Option<EvalFn>,
    lipschitz: Option<f64>,
    velocity_dependent: bool,
}

impl CustomField {
    pub fn new(
        dim: usize,
        eval: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            eval: Box::new(eval),
            jacobian_x: None,
            jacobian_v: None,
            lipschitz: None,
            velocity_dependent: false,
        }
    }

    pub fn with_jacobian_x(
        mut self,
        j: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jacobian_x = Some(Box::new(j));
        self
    }

    /// Supplies `∇_v F` and marks the field velocity-dependent.
    pub fn with_jacobian_v(
        mut self,
        j: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jacobian_v = Some(Box::new(j));
        self.velocity_dependent = true;
        self
    }

    pub fn with_lipschitz(mut self, m: f64) -> Self {
        self.lipschitz = Some(m);
        self
    }

    pub fn velocity_dependent(mut self) -> Self {
        self.velocity_dependent = true;
        self
    }
}

impl ForceField for CustomField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        (self.eval)(x, v, out)
    }

    fn jacobian_x(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match &self.jacobian_x {
            Some(j) => j(x, v, out),
            None => fd_jacobian(self, x, v, false, FD_STEP, out),
        }
    }

    fn jacobian_v(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match &self.jacobian_v {
            Some(j) => j(x, v, out),
            None if self.velocity_dependent => fd_jacobian(self, x, v, true, FD_STEP, out),
            None => out.fill(0.0),
        }
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        self.lipschitz
    }

    fn velocity_dependent(&self) -> bool {
        self.velocity_dependent
    }

    fn analytic_jacobians(&self) -> bool {
        self.jacobian_x.is_some() && (self.jacobian_v.is_some() || !self.velocity_dependent)
    }
}

/// Outcome of [`check_divergence_free_v`].
#[derive(Clone, Debug, Serialize)]
pub struct DivergenceReport {
    pub max_abs_div: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Max of `|tr ∇_v F|` over the sample points.
pub fn check_divergence_free_v(
    field: &dyn ForceField,
    samples: &[(Vec<f64>, Vec<f64>)],
) -> Result<DivergenceReport> {
    let d = field.dim();
    let tolerance = if field.analytic_jacobians() {
        DIV_TOL_ANALYTIC
    } else {
        10.0 * FD_STEP
    };
    let mut max_abs_div: f64 = 0.0;
    if field.velocity_dependent() {
        let mut jac = vec![0.0; d * d];
        for (x, v) in samples {
            check_dim(d, x.len())?;
            check_dim(d, v.len())?;
            field.jacobian_v(x, v, &mut jac);
            let trace: f64 = (0..d).map(|i| jac[i * d + i]).sum();
            max_abs_div = max_abs_div.max(trace.abs());
        }
    }
    Ok(DivergenceReport {
        max_abs_div,
        tolerance,
        pass: max_abs_div <= tolerance,
    })
}

/// Sampled estimate of `sup ‖∇_x F‖` (max-entry norm).
#[derive(Clone, Debug, Serialize)]
pub struct LipschitzEstimate {
    /// Max over the samples; a lower estimate of the true supremum.
    pub value: f64,
    pub points_per_axis: usize,
    pub spacing: Vec<f64>,
}

/// Evaluates `∇_x F` on a uniform grid of `points_per_axis` points per
/// axis (endpoints included) over `window`, with `v = 0`.
pub fn estimate_lipschitz(
    field: &dyn ForceField,
    window: &Rect,
    points_per_axis: usize,
) -> Result<LipschitzEstimate> {
    let d = field.dim();
    check_dim(d, window.dim())?;
    if !window.is_proper() {
        return config("Lipschitz window must be bounded and nondegenerate");
    }
    let n = points_per_axis.max(2);
    let spacing: Vec<f64> = window
        .lengths()
        .iter()
        .map(|l| l / (n - 1) as f64)
        .collect();
    let total = n.pow(d as u32);
    let v = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut value: f64 = 0.0;
    for k in 0..total {
        let mut rest = k;
        for i in (0..d).rev() {
            x[i] = window.lo[i] + (rest % n) as f64 * spacing[i];
            rest /= n;
        }
        field.jacobian_x(&x, &v, &mut jac);
        value = jac.iter().fold(value, |m, a| m.max(a.abs()));
    }
    Ok(LipschitzEstimate {
        value,
        points_per_axis: n,
        spacing,
    })
}

/// `M` for the verifiers: the field's declared bound, else a sampled one.
pub fn resolve_lipschitz(field: &dyn ForceField, window: &Rect) -> Result<f64> {
    match field.lipschitz_bound() {
        Some(m) => Ok(m),
        None => Ok(estimate_lipschitz(field, window, 65)?.value),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_builtins() -> Vec<BuiltinField> {
        vec![
            make_builtin(BuiltinKind::Zero, 2, &[]).unwrap(),
            make_builtin(BuiltinKind::Repulsive, 3, &[]).unwrap(),
            make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap(),
            make_builtin(BuiltinKind::Magnetic2D, 2, &[0.7]).unwrap(),
            make_builtin(BuiltinKind::Magnetic3D, 3, &[0.3, -1.2, 0.5]).unwrap(),
        ]
    }

    #[test]
    fn builtin_examples() {
        let h = make_builtin(BuiltinKind::Harmonic, 1, &[]).unwrap();
        let mut out = [0.0];
        h.eval(&[1.0], &[0.0], &mut out);
        assert_eq!(out[0], -1.0);

        let z = make_builtin(BuiltinKind::Zero, 2, &[]).unwrap();
        assert_eq!(z.lipschitz_bound(), Some(0.0));

        let m = make_builtin(BuiltinKind::Magnetic3D, 3, &[0.0, 0.0, 1.0]).unwrap();
        let mut out = [0.0; 3];
        m.eval(&[0.0; 3], &[1.0, 0.0, 0.0], &mut out);
        assert_eq!(out, [0.0, -1.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        assert!(make_builtin(BuiltinKind::Magnetic2D, 3, &[]).is_err());
        assert!(make_builtin(BuiltinKind::Magnetic3D, 3, &[1.0]).is_err());
        assert!(make_builtin(BuiltinKind::Magnetic3D, 2, &[0.0, 0.0, 1.0]).is_err());
        assert!(make_builtin(BuiltinKind::Zero, 0, &[]).is_err());
        assert!(make_builtin(BuiltinKind::Harmonic, 1, &[2.0]).is_err());
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for field in all_builtins() {
            let d = field.dim();
            let mut ja = vec![0.0; d * d];
            let mut jf = vec![0.0; d * d];
            for _ in 0..100 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                for wrt_v in [false, true] {
                    if wrt_v {
                        field.jacobian_v(&x, &v, &mut ja);
                    } else {
                        field.jacobian_x(&x, &v, &mut ja);
                    }
                    fd_jacobian(&field, &x, &v, wrt_v, FD_STEP, &mut jf);
                    let err = ja
                        .iter()
                        .zip(&jf)
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    assert!(err <= 1e-6, "{:?} wrt_v={wrt_v}: {err}", field.kind());
                }
            }
        }
    }

    #[test]
    fn divergence_checks() {
        let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..10)
            .map(|k| (vec![k as f64, 1.0], vec![0.5, -(k as f64)]))
            .collect();
        let m2 = make_builtin(BuiltinKind::Magnetic2D, 2, &[]).unwrap();
        let r = check_divergence_free_v(&m2, &samples).unwrap();
        assert_eq!(r.max_abs_div, 0.0);
        assert!(r.pass);

        let z = make_builtin(BuiltinKind::Zero, 2, &[]).unwrap();
        assert!(check_divergence_free_v(&z, &samples).unwrap().pass);

        let bad = CustomField::new(2, |_x, v, out| {
            out[0] = v[0];
            out[1] = 0.0;
        })
        .velocity_dependent();
        let r = check_divergence_free_v(&bad, &samples).unwrap();
        assert!((r.max_abs_div - 1.0).abs() < 1e-8);
        assert!(!r.pass);
        assert_eq!(r.tolerance, 10.0 * FD_STEP);
    }

    #[test]
    fn lipschitz_estimates() {
        let w = Rect::cube(2, -2.0, 3.0).unwrap();
        for (kind, expect) in [
            (BuiltinKind::Zero, 0.0),
            (BuiltinKind::Harmonic, 1.0),
            (BuiltinKind::Repulsive, 1.0),
        ] {
            let f = make_builtin(kind, 2, &[]).unwrap();
            let est = estimate_lipschitz(&f, &w, 11).unwrap();
            assert!((est.value - expect).abs() <= 1e-12);
        }
        let sine = CustomField::new(1, |x, _v, out| out[0] = x[0].sin());
        let w = Rect::new(vec![-std::f64::consts::PI], vec![std::f64::consts::PI]).unwrap();
        let est = estimate_lipschitz(&sine, &w, 1001).unwrap();
        // max |cos x| over the sample set, which contains x = 0.
        assert!((est.value - 1.0).abs() < 1e-9, "{}", est.value);
        assert_eq!(est.points_per_axis, 1001);
    }

    #[test]
    fn declared_lipschitz_overrides() {
        let f = make_builtin(BuiltinKind::Repulsive, 1, &[])
            .unwrap()
            .with_declared_lipschitz(0.0);
        assert_eq!(f.lipschitz_bound(), Some(0.0));
    }
}
