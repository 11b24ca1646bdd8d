use kinetra::dispersion::{
    det_perturbation_eps_limit, jacobian_bounds, mixing_equation_residual, mixing_time_lower_bound,
    regime_horizon,
};
use kinetra::equiint::{equi_modulus_report, modulus_v, modulus_xv};
use kinetra::fields::{check_divergence_free_v, estimate_lipschitz};
use kinetra::flow::{group_defect, integrate_flow, integrate_variational, volume_defect};
use kinetra::linalg::{det_leibniz, det_lu, factorial, max_entry_norm};
use kinetra::transport::{duality_check, resolvent, solve_cauchy, velocity_moment, SmoothBump};
use kinetra::{
    make_builtin, BuiltinField, BuiltinKind, ForceField, InitialData, IntegratorConfig, PhaseGrid,
    PhaseGridFunction, PhasePoint, PhaseWindow, Rect, TestFunction,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn builtin(kind: BuiltinKind, d: usize) -> BuiltinField {
    let params: &[f64] = match kind {
        BuiltinKind::Magnetic3D => &[0.2, 0.9, -0.4],
        BuiltinKind::Magnetic2D => &[0.8],
        _ => &[],
    };
    make_builtin(kind, d, params).unwrap()
}

fn field_strategy() -> impl Strategy<Value = (BuiltinKind, usize)> {
    prop_oneof![
        (1usize..=3).prop_map(|d| (BuiltinKind::Zero, d)),
        (1usize..=3).prop_map(|d| (BuiltinKind::Harmonic, d)),
        (1usize..=3).prop_map(|d| (BuiltinKind::Repulsive, d)),
        Just((BuiltinKind::Magnetic2D, 2)),
        Just((BuiltinKind::Magnetic3D, 3)),
    ]
}

fn point(d: usize, coords: &[f64]) -> PhasePoint {
    PhasePoint::new(coords[..d].to_vec(), coords[3..3 + d].to_vec()).unwrap()
}

fn cfg() -> IntegratorConfig {
    IntegratorConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn builtins_are_divergence_free((kind, d) in field_strategy(), c in prop::collection::vec(-3.0..3.0f64, 6)) {
        let f = builtin(kind, d);
        let r = check_divergence_free_v(&f, &[(c[..d].to_vec(), c[3..3 + d].to_vec())]).unwrap();
        prop_assert!(r.pass);
    }

    #[test]
    fn flow_group_and_volume(
        (kind, d) in field_strategy(),
        c in prop::collection::vec(-1.5..1.5f64, 6),
        t in -1.0..1.0f64,
        r in -1.0..1.0f64,
    ) {
        let f = builtin(kind, d);
        let z = point(d, &c);
        let s = r * (1.0 - t.abs());
        prop_assert!(group_defect(&f, &z, t, s, &cfg()).unwrap() <= 1e-8);
        prop_assert!(volume_defect(&f, &z, t, &cfg()).unwrap() <= 1e-8);
    }

    #[test]
    fn backward_undoes_forward((kind, d) in field_strategy(), c in prop::collection::vec(-1.5..1.5f64, 6), t in -2.0..2.0f64) {
        let f = builtin(kind, d);
        let z = point(d, &c);
        let there = integrate_flow(&f, &z, t, &cfg()).unwrap();
        let back = integrate_flow(&f, &there, -t, &cfg()).unwrap();
        prop_assert!(back.distance(&z) <= 1e-9);
    }

    #[test]
    fn variational_matches_finite_differences((kind, d) in field_strategy(), c in prop::collection::vec(-1.0..1.0f64, 6), t in -1.5..1.5f64) {
        let f = builtin(kind, d);
        let z = point(d, &c);
        let var = integrate_variational(&f, &z, t, &cfg()).unwrap();
        let h = 1e-5;
        for j in 0..d {
            let mut p = z.clone();
            let mut m = z.clone();
            p.v[j] += h;
            m.v[j] -= h;
            let xp = integrate_flow(&f, &p, t, &cfg()).unwrap().x;
            let xm = integrate_flow(&f, &m, t, &cfg()).unwrap().x;
            for i in 0..d {
                let fd = (xp[i] - xm[i]) / (2.0 * h);
                prop_assert!((fd - var.jx[(i, j)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gronwall_and_det_envelopes((kind, d) in field_strategy(), c in prop::collection::vec(-2.0..2.0f64, 6), frac in 0.01..1.0f64) {
        let f = builtin(kind, d);
        let m = f.lipschitz_bound().unwrap();
        let t = frac * regime_horizon(&f, m).min(2.0);
        let r = jacobian_bounds(&f, m, &[point(d, &c)], &[t], &cfg()).unwrap();
        prop_assert!(r.gronwall_pass[0], "{} > {}", r.gronwall_norm[0], r.gronwall_bound[0]);
        prop_assert!(r.det_pass[0], "{} > {}", r.det_inv[0], r.det_bound[0]);
        if kind == BuiltinKind::Zero {
            prop_assert!((r.gronwall_norm[0] - t).abs() <= 1e-10);
        }
    }

    #[test]
    fn mixing_time_solves_its_equation(m in 1e-3..50.0f64, d in 1usize..=4) {
        let t = mixing_time_lower_bound(m, d);
        prop_assert!(t > 0.0 && t.is_finite());
        prop_assert!(mixing_equation_residual(m, d, t).abs() <= 1e-10);
        prop_assert!(mixing_time_lower_bound(2.0 * m, d) < t);
    }

    #[test]
    fn det_perturbation_random(d in 1usize..=4, entries in prop::collection::vec(-1.0..1.0f64, 16), scale in 0.0..1.0f64) {
        let eps = scale * det_perturbation_eps_limit(d);
        let a = DMatrix::from_iterator(d, d, entries.iter().take(d * d).map(|e| e * eps));
        let m = DMatrix::identity(d, d) + &a;
        prop_assert!(det_lu(&m) >= 1.0 - factorial(d) * max_entry_norm(&a) - 1e-15);
        prop_assert!((det_lu(&m) - det_leibniz(&m)).abs() <= 1e-12);
    }

    #[test]
    fn moduli_monotone_and_bounded(vals in prop::collection::vec(0.0..5.0f64, 64), a in 0.001..1.0f64, b in 0.001..1.0f64) {
        let grid = PhaseGrid::new(PhaseWindow::cube(1, 0.0, 1.0).unwrap(), 8, 8).unwrap();
        let f = PhaseGridFunction::new(grid, vals).unwrap();
        let k = PhaseWindow::cube(1, 0.0, 1.0).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let r = equi_modulus_report(&f, &k, &[lo, (lo + hi) / 2.0, hi]).unwrap();
        prop_assert!(r.is_monotone());
        // concavity along the midpoint
        prop_assert!(2.0 * r.modulus_xv[1] + 1e-12 >= r.modulus_xv[0] + r.modulus_xv[2]);
        prop_assert!(2.0 * r.modulus_v[1] + 1e-12 >= r.modulus_v[0] + r.modulus_v[2]);
        prop_assert!(modulus_xv(&f, &k, hi).unwrap() <= f.l1_norm() + 1e-12);
        prop_assert!(modulus_v(&f, &k, hi).unwrap() <= f.l1_norm() + 1e-12);
    }

    #[test]
    fn moments_linear_and_positive(u in prop::collection::vec(0.0..2.0f64, 36), w in prop::collection::vec(-2.0..2.0f64, 36), a in -3.0..3.0f64) {
        let grid = PhaseGrid::new(PhaseWindow::cube(1, -1.0, 1.0).unwrap(), 6, 6).unwrap();
        let fu = PhaseGridFunction::new(grid.clone(), u).unwrap();
        let fw = PhaseGridFunction::new(grid, w).unwrap();
        let psi = TestFunction::bump(0.9);
        let ru = velocity_moment(&fu, &psi);
        prop_assert!(ru.values.iter().all(|&r| r >= 0.0));
        let rw = velocity_moment(&fw, &psi);
        let combo = velocity_moment(&fu.combine(1.0, &fw, a).unwrap(), &psi);
        for k in 0..combo.values.len() {
            prop_assert!((combo.values[k] - (ru.values[k] + a * rw.values[k])).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn duality_for_random_bumps(cx in -0.3..0.3f64, cv in -0.3..0.3f64, harmonic in any::<bool>()) {
        let kind = if harmonic { BuiltinKind::Harmonic } else { BuiltinKind::Zero };
        let f = builtin(kind, 1);
        let bump = SmoothBump::new(PhasePoint::new(vec![cx], vec![cv]).unwrap(), 1.0, 1.0);
        let grid = PhaseGrid::new(PhaseWindow::cube(1, -2.0, 2.0).unwrap(), 96, 96).unwrap();
        let phi0 = InitialData::new(PhaseWindow::unbounded(1), |x, v| (x[0] - 0.2 * v[0]).cos());
        let r = duality_check(&f, &bump.sample(&grid).unwrap(), &bump.sample_transport_derivative(&f, &grid).unwrap(), &phi0, 0.8, 48, &cfg()).unwrap();
        prop_assert!(r.residual <= 1e-4, "{}", r.residual);
    }
}

#[test]
fn lipschitz_estimates_are_exact() {
    let window = Rect::cube(2, -2.0, 2.0).unwrap();
    for (kind, m) in [
        (BuiltinKind::Zero, 0.0),
        (BuiltinKind::Harmonic, 1.0),
        (BuiltinKind::Repulsive, 1.0),
    ] {
        let est = estimate_lipschitz(&builtin(kind, 2), &window, 9).unwrap();
        assert!((est.value - m).abs() <= 1e-12, "{kind:?}: {}", est.value);
    }
}

#[test]
fn transport_conserves_mass() {
    let h = builtin(BuiltinKind::Harmonic, 1);
    let grid = PhaseGrid::new(PhaseWindow::cube(1, -3.0, 3.0).unwrap(), 240, 240).unwrap();
    let box0 = PhaseWindow::new(
        Rect::cube(1, -1.0, 0.5).unwrap(),
        Rect::cube(1, -0.5, 1.0).unwrap(),
    )
    .unwrap();
    let f0 = InitialData::indicator(box0.clone());
    let mass0 = box0.volume();
    let dx = 6.0 / 240.0;
    for t in [0.3, 1.0, 2.5] {
        let f = solve_cauchy(&h, &f0, t, &grid, &cfg()).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0 || v == 1.0));
        // boundary cells of a perimeter-6 square
        assert!((f.mass() - mass0).abs() <= 6.0 * dx, "t={t}: {}", f.mass());
    }
    let smooth = InitialData::new(PhaseWindow::unbounded(1), |x, v| {
        (-(x[0] * x[0] + v[0] * v[0]) * 4.0).exp() * (1.0 + 0.5 * x[0])
    });
    let m0 = PhaseGridFunction::sample(grid.clone(), |x, v| smooth.eval(x, v))
        .unwrap()
        .mass();
    let m1 = solve_cauchy(&h, &smooth, 1.3, &grid, &cfg())
        .unwrap()
        .mass();
    assert!((m0 - m1).abs() <= 1e-10);
}

fn gaussian(cx: f64, cv: f64) -> InitialData {
    InitialData::new(PhaseWindow::unbounded(1), move |x, v| {
        (-((x[0] - cx).powi(2) + (v[0] - cv).powi(2))).exp()
    })
    .with_sup_bound(1.0)
}

#[test]
fn resolvent_contracts_l1() {
    let h = builtin(BuiltinKind::Harmonic, 1);
    let grid = PhaseGrid::new(PhaseWindow::cube(1, -6.0, 6.0).unwrap(), 40, 40).unwrap();
    let lambda = 1.5;
    let tail = 1e-6;
    for (cx, cv) in [(0.0, 0.0), (0.7, -0.4), (-1.0, 1.0)] {
        let g = gaussian(cx, cv);
        let gs = PhaseGridFunction::sample(grid.clone(), |x, v| g.eval(x, v)).unwrap();
        let r = resolvent(&h, &g, lambda, &grid, &cfg(), tail).unwrap();
        assert!(r.l1_norm() <= gs.l1_norm() / lambda + tail * grid.window.volume());
    }
}

#[test]
fn resolvent_identity_holds_weakly() {
    // λ∬(Rg)φ − ∬(Rg)(v·∇_x + F·∇_v)φ = ∬gφ for compactly supported φ
    let h = builtin(BuiltinKind::Harmonic, 1);
    let grid = PhaseGrid::new(PhaseWindow::cube(1, -1.5, 1.5).unwrap(), 48, 48).unwrap();
    let lambda = 2.0;
    let g = gaussian(0.3, -0.2);
    let r = resolvent(&h, &g, lambda, &grid, &cfg(), 1e-7).unwrap();
    let phi = SmoothBump::new(PhasePoint::new(vec![0.1], vec![0.0]).unwrap(), 1.2, 1.2);
    let phi_s = phi.sample(&grid).unwrap();
    let dphi = phi.sample_transport_derivative(&h, &grid).unwrap();
    let gs = PhaseGridFunction::sample(grid.clone(), |x, v| g.eval(x, v)).unwrap();
    let cell = grid.cell_volume();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() * cell;
    let lhs = lambda * dot(r.values(), phi_s.values()) - dot(r.values(), dphi.values());
    let rhs = dot(gs.values(), phi_s.values());
    assert!((lhs - rhs).abs() <= 1e-5, "{lhs} vs {rhs}");
}

/// `det(I + A)` is affine in each entry, so its minimum over the box
/// `‖A‖ ≤ r` is attained at a vertex. Enumerating vertices checks the
/// bound exactly at each tested radius.
#[test]
fn det_perturbation_holds_on_every_vertex() {
    for d in 1..=4usize {
        let n = d * d;
        for frac in [0.25, 0.5, 1.0] {
            let r = frac * det_perturbation_eps_limit(d);
            let mut worst = f64::INFINITY;
            for mask in 0u32..(1u32 << n) {
                let a = DMatrix::from_fn(
                    d,
                    d,
                    |i, j| if mask >> (i * d + j) & 1 == 1 { r } else { -r },
                );
                worst = worst.min(det_leibniz(&(DMatrix::identity(d, d) + a)));
            }
            assert!(worst >= 1.0 - factorial(d) * r, "d={d}, r={r}: {worst}");
        }
    }
}
