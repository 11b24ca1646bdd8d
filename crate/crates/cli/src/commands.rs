use std::fs::File;
use std::io::{BufReader, Write};

use kinetra::dispersion::{
    det_perturbation_check, det_perturbation_eps_limit, injectivity_time, jacobian_bounds,
    log_spaced_times, mixing_time_lower_bound, regime_horizon, verify_dispersion, DispersionGrid,
    DispersionSettings, SharpEnvelope,
};
use kinetra::equiint::{
    equi_modulus_report, indicator_transport_experiment, IndicatorTransportReport,
    IndicatorTransportSettings,
};
use kinetra::fields::resolve_lipschitz;
use kinetra::flow::{read_points_csv, sample_trajectory, write_trajectory_csv};
use kinetra::transport::{
    duality_check, resolvent as solve_resolvent, resolvent_many, sobolev_seminorm, solve_cauchy,
    velocity_moment, SmoothBump,
};
use kinetra::{
    BuiltinField, Error, InitialData, PhaseGrid, PhaseGridFunction, PhasePoint, PhaseWindow, Rect,
    Result, TestFunction,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{PsiKind, RunConfig, Suite};
use crate::output::Emitter;

struct Setup {
    field: BuiltinField,
    window: PhaseWindow,
    lipschitz: f64,
    horizon: f64,
}

impl Setup {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let field = cfg.field.build()?;
        let window = cfg.window()?;
        let lipschitz = resolve_lipschitz(&field, &window.x)?;
        let horizon = regime_horizon(&field, lipschitz);
        Ok(Self {
            field,
            window,
            lipschitz,
            horizon,
        })
    }

    fn grid(&self, cfg: &RunConfig) -> Result<PhaseGrid> {
        PhaseGrid::new(self.window.clone(), cfg.grid.nx, cfg.grid.nv)
    }

    fn times(&self, cfg: &RunConfig) -> Vec<f64> {
        match &cfg.times {
            Some(ts) => {
                let mut ts = ts.clone();
                ts.sort_by(f64::total_cmp);
                ts.dedup();
                ts
            }
            None => log_spaced_times(
                cfg.sweep.min_fraction * self.horizon,
                self.horizon,
                cfg.sweep.count,
            ),
        }
    }

    fn warn_out_of_regime(&self, check: &str, times: &[f64], in_regime: &[bool]) {
        let late: Vec<String> = times
            .iter()
            .zip(in_regime)
            .filter(|(_, ok)| !**ok)
            .map(|(t, _)| format!("{t:.4}"))
            .collect();
        if !late.is_empty() {
            eprintln!(
                "warning: {check}: {} time(s) beyond the horizon {:.4} are not judged: {}",
                late.len(),
                self.horizon,
                late.join(" ")
            );
        }
    }
}

fn grid_json(f: &PhaseGridFunction) -> serde_json::Value {
    json!({ "grid": f.grid(), "values": f.values() })
}

/// A bump centred in the window, vanishing on the outer layer of nodes.
fn centred_bump(window: &PhaseWindow) -> SmoothBump {
    let mid = |r: &Rect| {
        r.lo.iter()
            .zip(&r.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect::<Vec<_>>()
    };
    let side = |r: &Rect| r.lengths().into_iter().fold(f64::INFINITY, f64::min);
    let centre = PhasePoint::from_state(&[mid(&window.x), mid(&window.v)].concat());
    SmoothBump::new(centre, 0.45 * side(&window.x), 0.45 * side(&window.v))
}

pub fn flow(cfg: &RunConfig) -> Result<bool> {
    let field = cfg.field.build()?;
    let d = cfg.dim();
    let mut points = Vec::new();
    for p in &cfg.flow.points {
        if p.len() != 2 * d {
            return Err(Error::Dimension {
                expected: 2 * d,
                got: p.len(),
            });
        }
        points.push(PhasePoint::from_state(p));
    }
    if let Some(path) = &cfg.flow.points_file {
        points.extend(read_points_csv(BufReader::new(File::open(path)?), d)?);
    }
    if points.is_empty() {
        return Err(Error::Config("flow needs at least one point".into()));
    }
    let trajectories = points
        .iter()
        .map(|z| sample_trajectory(&field, z, cfg.flow.t, cfg.flow.samples, &cfg.integrator))
        .collect::<Result<Vec<_>>>()?;
    let json = json!(trajectories
        .iter()
        .map(|tr| tr
            .iter()
            .map(|(t, z)| json!({ "t": t, "x": z.x, "v": z.v }))
            .collect::<Vec<_>>())
        .collect::<Vec<_>>());
    let mut em = Emitter::new("flow", cfg)?;
    em.add(
        "trajectories",
        |out| write_trajectory_csv(out, d, &trajectories),
        json,
    )?;
    em.finish()?;
    Ok(true)
}

pub fn tau(cfg: &RunConfig) -> Result<bool> {
    let d = cfg.tau.dim.unwrap_or(cfg.dim());
    if d == 0 {
        return Err(Error::Config("tau.dim must be positive".into()));
    }
    let m = match cfg.tau.lipschitz.or(cfg.field.lipschitz) {
        Some(m) if m >= 0.0 && m.is_finite() => m,
        Some(_) => {
            return Err(Error::Config(
                "tau.lipschitz must be finite and nonnegative".into(),
            ))
        }
        None => resolve_lipschitz(&cfg.field.build()?, &cfg.window()?.x)?,
    };
    let mut em = Emitter::new("tau", cfg)?;
    em.add_pairs(
        "tau",
        &[
            ("lipschitz", m),
            ("dim", d as f64),
            ("mixing_time", mixing_time_lower_bound(m, d)),
            ("injectivity_time", injectivity_time(m)),
        ],
    )?;
    em.finish()?;
    Ok(true)
}

fn check_dispersion(cfg: &RunConfig, s: &Setup, em: &mut Emitter) -> Result<bool> {
    let f0 = InitialData::indicator(cfg.initial()?);
    let times = s.times(cfg);
    let mut settings = DispersionSettings::new(s.lipschitz);
    settings.slack_coeff = cfg.tolerances.slack_coeff;
    settings.sharp = SharpEnvelope::for_builtin(s.field.kind());
    let grid = DispersionGrid::Adaptive {
        nx: cfg.grid.nx,
        nv: cfg.grid.nv,
    };
    let r = verify_dispersion(&s.field, &f0, &times, &grid, &settings, &cfg.integrator)?;
    s.warn_out_of_regime("dispersion", &r.times, &r.in_regime);
    let failures = r.failures();
    let judged = r.in_regime.iter().filter(|b| **b).count();
    eprintln!(
        "dispersion: {} of {judged} in-regime times pass, max ratio {:.4}",
        judged - failures.len(),
        r.ratio
            .iter()
            .zip(&r.in_regime)
            .filter(|(_, b)| **b)
            .map(|(x, _)| *x)
            .fold(0.0, f64::max)
    );
    for &k in &failures {
        eprintln!(
            "  violation at t = {}: measured {:.6e}, bound {:.6e}",
            r.times[k], r.measured_norm[k], r.bound[k]
        );
    }
    em.add(
        "dispersion",
        |out| r.write_csv(out),
        serde_json::to_value(&r)?,
    )?;
    Ok(failures.is_empty())
}

fn check_jacobian(cfg: &RunConfig, s: &Setup, em: &mut Emitter) -> Result<bool> {
    let d = cfg.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |r: &Rect, rng: &mut ChaCha8Rng| -> Vec<f64> {
        r.lo.iter()
            .zip(&r.hi)
            .map(|(a, b)| rng.gen_range(*a..*b))
            .collect()
    };
    // Velocities come in groups of four per position so the injectivity
    // margin has pairs to compare.
    let mut samples = Vec::with_capacity(cfg.jacobian.samples);
    let mut x = Vec::new();
    for i in 0..cfg.jacobian.samples {
        if i % 4 == 0 {
            x = draw(&s.window.x, &mut rng);
        }
        samples.push(PhasePoint::new(x.clone(), draw(&s.window.v, &mut rng))?);
    }
    let times = s.times(cfg);
    let r = jacobian_bounds(&s.field, s.lipschitz, &samples, &times, &cfg.integrator)?;
    s.warn_out_of_regime("jacobian", &r.times, &r.in_regime);
    let failures = r.failures();
    eprintln!(
        "jacobian: {} of {} times pass at {} samples",
        r.times.len() - failures.len(),
        r.times.len(),
        samples.len()
    );
    for &k in &failures {
        eprintln!(
            "  violation at t = {}: 1/det {:.6e} (bound {:.6e}), norm {:.6e} (bound {:.6e}), margin {:?} (bound {:.6e})",
            r.times[k],
            r.det_inv[k],
            r.det_bound[k],
            r.gronwall_norm[k],
            r.gronwall_bound[k],
            r.injectivity_margin[k],
            r.injectivity_bound[k]
        );
    }
    em.add(
        "jacobian",
        |out| r.write_csv(out),
        serde_json::to_value(&r)?,
    )?;

    let det = det_perturbation_check(
        d,
        cfg.jacobian.det_trials,
        det_perturbation_eps_limit(d),
        cfg.seed,
    )?;
    eprintln!(
        "det perturbation: {} violations in {} trials, min margin {:.4e}",
        det.violations, det.trials, det.min_margin
    );
    em.add_flat("det_perturbation", &det)?;
    Ok(failures.is_empty() && det.pass())
}

fn check_duality(cfg: &RunConfig, s: &Setup, em: &mut Emitter) -> Result<bool> {
    let grid = s.grid(cfg)?;
    let bump = centred_bump(&s.window);
    let f = bump.sample(&grid)?;
    let df = bump.sample_transport_derivative(&s.field, &grid)?;
    let d = cfg.dim();
    let phi0 = InitialData::new(PhaseWindow::unbounded(d), |x, v| {
        (x[0] + 0.5).sin() * (-v.iter().map(|c| c * c).sum::<f64>()).exp()
    });
    let r = duality_check(
        &s.field,
        &f,
        &df,
        &phi0,
        cfg.duality.t,
        cfg.duality.slices,
        &cfg.integrator,
    )?;
    let ok = r.residual.abs() <= cfg.tolerances.duality_tol;
    eprintln!(
        "duality: residual {:.4e} (tolerance {:.1e}){}",
        r.residual,
        cfg.tolerances.duality_tol,
        if ok { "" } else { " VIOLATED" }
    );
    em.add_flat("duality", &r)?;
    Ok(ok)
}

fn check_resolvent(cfg: &RunConfig, s: &Setup, em: &mut Emitter) -> Result<bool> {
    let grid = s.grid(cfg)?;
    let d = cfg.dim();
    let lambda = cfg.resolvent.lambda;
    let tol = cfg.tolerances.tail_tol;
    let one = InitialData::constant(PhaseWindow::unbounded(d), 1.0);
    let r1 = solve_resolvent(&s.field, &one, lambda, &grid, &cfg.integrator, tol)?;
    let const_err = r1
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max((v - 1.0 / lambda).abs()));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bounds: Vec<(f64, f64)> = s
        .window
        .x
        .lo
        .iter()
        .zip(&s.window.x.hi)
        .chain(s.window.v.lo.iter().zip(&s.window.v.hi))
        .map(|(a, b)| (*a, *b))
        .collect();
    let sources: Vec<InitialData> = (0..cfg.resolvent.sources)
        .map(|_| {
            let c: Vec<f64> = bounds.iter().map(|(a, b)| rng.gen_range(*a..*b)).collect();
            let sigma = rng.gen_range(0.5..1.5);
            let amp = rng.gen_range(0.5..2.0);
            InitialData::new(PhaseWindow::unbounded(d), move |x, v| {
                let r2: f64 = x
                    .iter()
                    .chain(v)
                    .zip(&c)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                amp * (-r2 / (2.0 * sigma * sigma)).exp()
            })
            .with_sup_bound(amp)
        })
        .collect();
    let outs = resolvent_many(&s.field, &sources, lambda, &grid, &cfg.integrator, tol)?;
    let norm = outs
        .iter()
        .zip(&sources)
        .map(|(r, g)| {
            r.values().iter().fold(0.0f64, |m, v| m.max(v.abs())) / g.sup_bound().unwrap_or(1.0)
        })
        .fold(0.0, f64::max);
    let const_ok = const_err <= tol;
    let norm_ok = norm <= 1.0 / lambda + tol;
    eprintln!(
        "resolvent: constant-source error {const_err:.3e} (tolerance {tol:.1e}), operator-norm estimate {norm:.6} (bound {:.6})",
        1.0 / lambda + tol
    );
    if !const_ok {
        eprintln!("  violation: resolvent of 1 differs from 1/lambda");
    }
    if !norm_ok {
        eprintln!("  violation: sup-norm estimate exceeds 1/lambda");
    }
    em.add_pairs(
        "resolvent",
        &[
            ("lambda", lambda),
            ("constant_error", const_err),
            ("operator_norm_estimate", norm),
            ("operator_norm_bound", 1.0 / lambda + tol),
            ("sources", sources.len() as f64),
        ],
    )?;
    Ok(const_ok && norm_ok)
}

fn check_equi(cfg: &RunConfig, s: &Setup, em: &mut Emitter) -> Result<bool> {
    let grid = s.grid(cfg)?;
    let k = cfg.initial()?;
    let mut ok = true;
    for (i, &eps) in cfg.equi.eps.iter().enumerate() {
        let f = cfg.equi.family.sample(eps, &grid)?;
        let r = equi_modulus_report(&f, &k, &cfg.equi.alphas)?;
        if !r.is_monotone() {
            eprintln!("  violation: moduli for eps = {eps} are not monotone in alpha");
            ok = false;
        }
        em.add(
            format!("equi_modulus_{i}"),
            |out| r.write_csv(out),
            json!({ "eps": eps, "report": r }),
        )?;
    }
    eprintln!("equi: moduli computed for {} members", cfg.equi.eps.len());

    let bump = centred_bump(&s.window);
    let f = bump.sample(&grid)?;
    let w = cfg.equi.indicator_width;
    let a = Rect::new(
        bump.center.x.iter().map(|c| c - 0.5 * w).collect(),
        bump.center.x.iter().map(|c| c + 0.5 * w).collect(),
    )?;
    let mut settings = IndicatorTransportSettings::new(s.lipschitz);
    settings.nv_measure = cfg.equi.indicator_nv;
    settings.slack_coeff = cfg.tolerances.slack_coeff;
    let reports = [0.25, 0.5, 1.0]
        .iter()
        .map(|frac| {
            indicator_transport_experiment(
                &s.field,
                &f,
                &a,
                frac * s.horizon,
                &TestFunction::bump(1.0),
                &settings,
                &cfg.integrator,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        let pass = r.pass && r.binary_values;
        eprintln!(
            "indicator transport t = {:.4}: sup fiber measure {:.4e}, bound {:.4e}{}",
            r.t,
            r.sup_fiber_measure,
            r.bound,
            if pass { "" } else { " VIOLATED" }
        );
        ok &= pass;
    }
    em.add(
        "indicator_transport",
        |out| IndicatorTransportReport::write_csv(&reports, out),
        serde_json::to_value(&reports)?,
    )?;
    Ok(ok)
}

pub fn verify(cfg: &RunConfig) -> Result<bool> {
    let s = Setup::new(cfg)?;
    eprintln!(
        "field {} (d = {}), M = {}, horizon {:.6}",
        s.field.kind().name(),
        cfg.dim(),
        s.lipschitz,
        s.horizon
    );
    let mut em = Emitter::new("verify", cfg)?;
    let all = cfg.suite == Suite::All;
    let mut ok = true;
    if all || cfg.suite == Suite::Dispersion {
        ok &= check_dispersion(cfg, &s, &mut em)?;
    }
    if all || cfg.suite == Suite::Jacobian {
        ok &= check_jacobian(cfg, &s, &mut em)?;
    }
    if all || cfg.suite == Suite::Duality {
        ok &= check_duality(cfg, &s, &mut em)?;
    }
    if all || cfg.suite == Suite::Resolvent {
        ok &= check_resolvent(cfg, &s, &mut em)?;
    }
    if all || cfg.suite == Suite::Equi {
        ok &= check_equi(cfg, &s, &mut em)?;
    }
    em.finish()?;
    eprintln!(
        "{}",
        if ok {
            "all checks passed"
        } else {
            "some checks FAILED"
        }
    );
    Ok(ok)
}

pub fn moment(cfg: &RunConfig) -> Result<bool> {
    let s = Setup::new(cfg)?;
    let grid = s.grid(cfg)?;
    let f = solve_cauchy(
        &s.field,
        &InitialData::indicator(cfg.initial()?),
        cfg.moment.t,
        &grid,
        &cfg.integrator,
    )?;
    let psi = match cfg.moment.psi {
        PsiKind::Bump => TestFunction::bump(cfg.moment.radius),
        PsiKind::Ball => TestFunction::ball_indicator(cfg.moment.radius),
    };
    let rho = velocity_moment(&f, &psi);
    let sob = sobolev_seminorm(&rho, cfg.moment.sobolev_s)?;
    eprintln!("sobolev norm of order {}: {sob:.6e}", cfg.moment.sobolev_s);
    let mut em = Emitter::new("moment", cfg)?;
    em.add(
        "moment",
        |out| {
            writeln!(out, "# sobolev_norm,{sob}")?;
            rho.write_csv(out)
        },
        json!({ "grid": rho.grid, "values": rho.values, "sobolev_norm": sob }),
    )?;
    em.finish()?;
    Ok(true)
}

pub fn resolvent(cfg: &RunConfig) -> Result<bool> {
    let s = Setup::new(cfg)?;
    let grid = s.grid(cfg)?;
    let g = InitialData::indicator(cfg.initial()?);
    let r = solve_resolvent(
        &s.field,
        &g,
        cfg.resolvent.lambda,
        &grid,
        &cfg.integrator,
        cfg.tolerances.tail_tol,
    )?;
    let mut em = Emitter::new("resolvent", cfg)?;
    em.add("resolvent", |out| r.write_csv(out), grid_json(&r))?;
    em.finish()?;
    Ok(true)
}

/// Writes the equiintegrability reports; verdicts are left to `verify`.
pub fn equi(cfg: &RunConfig) -> Result<bool> {
    let s = Setup::new(cfg)?;
    let mut em = Emitter::new("equi", cfg)?;
    check_equi(cfg, &s, &mut em)?;
    em.finish()?;
    Ok(true)
}
