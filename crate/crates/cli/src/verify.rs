//! Structural invariant suite behind the `verify` command.

use mfg_core::energy::{check_feasible, energy, subadditivity_gap, SubadditivityReport};
use mfg_core::fokker_planck::{drift_from_value, solve_stationary_fp, FpProblem};
use mfg_core::grid::{divergence, gradient, inner_faces, GradientScheme};
use mfg_core::model::radial_conjugate;
use mfg_core::{Grid, HamiltonianSpec, KPair, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bundle::{Assertion, Failure, ResultBundle};
use crate::config::RunConfig;

/// Relative constraint residual accepted for Fokker–Planck output.
pub const LINEAR_TOL: f64 = 1e-11;

#[derive(Debug, Serialize)]
struct VerifySummary {
    checks: usize,
    passed: usize,
    legendre_max_relative_error: f64,
    fenchel_samples: usize,
    fenchel_violations: usize,
    fenchel_min_slack: f64,
    adjointness_error: f64,
    fp_mass_error: f64,
    fp_min_density: f64,
    fp_constraint_residual: f64,
    scaling_kinetic_error: f64,
    scaling_coupling_error: f64,
    subadditivity: Vec<SubadditivityReport>,
}

fn legendre(hams: &[HamiltonianSpec]) -> f64 {
    let mut worst = 0.0f64;
    for h in hams {
        for r in [0.05, 0.3, 1.0, 2.5, 7.0] {
            let exact = h.lagrangian_norm(r);
            let t_star = (r / (h.c_h * h.gamma)).powf(1.0 / (h.gamma - 1.0));
            let oracle = radial_conjugate(|t| h.c_h * t.powf(h.gamma), r, 4.0 * t_star + 1.0);
            worst = worst.max((oracle - exact).abs() / exact.abs().max(1e-300));
        }
    }
    worst
}

/// `H(p) + L(q) − p·q` over random pairs in the plane: (violations, min slack).
fn fenchel(hams: &[HamiltonianSpec], samples: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for k in 0..samples {
        let h = &hams[k % hams.len()];
        let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let q = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let pq = p[0] * q[0] + p[1] * q[1];
        let slack = h.value(&p) + h.lagrangian(&q) - pq;
        min_slack = min_slack.min(slack);
        if slack < -1e-12 * (1.0 + pq.abs()) {
            violations += 1;
        }
    }
    (violations, min_slack)
}

fn adjointness() -> mfg_core::Result<f64> {
    let mut worst = 0.0f64;
    for (dim, n) in [(1, 101), (2, 21)] {
        let g = Grid::new(dim, 1.5, n)?;
        let f = ScalarField::from_fn(g, |p| (p[0] + 0.3 * p[1]).cos() + p[0] * p[1] * p[1]);
        let q = ScalarField::from_fn(g, |p| (2.0 * p[0]).sin() * (1.0 + p[1]) + 0.1);
        let v = gradient(&f, GradientScheme::Central)?;
        let lhs = divergence(&v).zip_map(&q, |a, b| a * b)?.integrate();
        let rhs = inner_faces(&v, &gradient(&q, GradientScheme::Central)?)?;
        worst = worst.max((lhs + rhs).abs());
    }
    Ok(worst)
}

/// Mass error, minimum density and relative constraint residual of Fokker–Planck output.
fn fp_checks(ham: &HamiltonianSpec) -> mfg_core::Result<(f64, f64, f64)> {
    let (mut mass_err, mut min_m, mut res) = (0.0f64, f64::INFINITY, 0.0f64);
    for (dim, n, eps) in [(1, 401, 0.3), (1, 801, 0.02), (2, 41, 0.4)] {
        let g = Grid::new(dim, 3.0, n)?;
        let u = ScalarField::from_fn(g, |p| 0.5 * (p[0] * p[0] + p[1] * p[1]) + 0.3 * (2.0 * p[0]).sin() * (1.0 + 0.2 * p[1]));
        let mass = 1.7;
        let fp = solve_stationary_fp(&FpProblem { drift: drift_from_value(&u, ham), epsilon: eps, mass }, None)?;
        mass_err = mass_err.max((fp.m.integrate() - mass).abs() / mass);
        min_m = min_m.min(fp.m.min());
        let pair = KPair::new(fp.m, fp.w, eps, mass)?;
        res = res.max(check_feasible(&pair)?.relative());
    }
    Ok((mass_err, min_m, res))
}

/// Relative errors of `K(c·pair) = c·K(pair)` and `C(c·m) = c^{α+1} C(m)`.
fn scaling(config: &RunConfig, seed: u64) -> mfg_core::Result<(f64, f64)> {
    let model = &config.model;
    let g = Grid::new(model.dim, 4.0, if model.dim == 1 { 401 } else { 41 })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ek, mut ec) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let (a, s, c) = (rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0), rng.random_range(1.1..4.0));
        let m = ScalarField::from_fn(g, |p| a * (-(p[0] - s).powi(2) - p[1] * p[1]).exp());
        let pair = KPair::gradient_pair(m, model.epsilon)?;
        let big = pair.scaled(c)?;
        let e1 = energy(&pair, &model.with_mass(pair.mass), None)?;
        let e2 = energy(&big, &model.with_mass(big.mass), None)?;
        ek = ek.max((e2.kinetic / e1.kinetic - c).abs() / c);
        let expect = c.powf(model.coupling.alpha + 1.0);
        if e1.coupling != 0.0 {
            ec = ec.max((e2.coupling / e1.coupling - expect).abs() / expect);
        }
    }
    Ok((ek, ec))
}

/// Endpoint gaps shrink monotonically toward both ends of the fraction list.
fn endpoint_trend(reports: &[SubadditivityReport], total: f64) -> (bool, f64) {
    let lower: Vec<&SubadditivityReport> = reports.iter().filter(|r| r.a <= 0.25 * total + 1e-12).collect();
    let upper: Vec<&SubadditivityReport> = reports.iter().filter(|r| r.a >= 0.75 * total - 1e-12).collect();
    let rising = lower.windows(2).all(|w| w[0].gap < w[1].gap);
    let falling = upper.windows(2).all(|w| w[0].gap > w[1].gap);
    let peak = reports.iter().map(|r| r.gap).fold(0.0, f64::max);
    let ends = [reports.first(), reports.last()].iter().flatten().map(|r| r.gap.abs()).fold(0.0, f64::max);
    (rising && falling && lower.len() >= 2 && upper.len() >= 2, if peak > 0.0 { ends / peak } else { f64::INFINITY })
}

pub fn suite(config: &RunConfig, b: &mut ResultBundle) {
    let base = config.model.hamiltonian;
    let mut hams = vec![base];
    for (c, g) in [(1.0, 1.5), (0.5, 2.0), (2.0, 3.0), (0.7, 1.2)] {
        hams.extend(HamiltonianSpec::new(c, g).ok());
    }
    let leg = legendre(&hams);
    b.assertions.push(Assertion::at_most("legendre_sup_oracle", leg, 1e-6));
    let samples = config.verify.fenchel_samples;
    let (violations, min_slack) = fenchel(&hams, samples, config.seed);
    let mut a = Assertion::holds("fenchel_inequality", violations == 0, violations as f64, format!("violations among {samples} random pairs"));
    a.bound = 0.0;
    b.assertions.push(a);

    let mut summary = VerifySummary {
        checks: 0,
        passed: 0,
        legendre_max_relative_error: leg,
        fenchel_samples: samples,
        fenchel_violations: violations,
        fenchel_min_slack: min_slack,
        adjointness_error: f64::NAN,
        fp_mass_error: f64::NAN,
        fp_min_density: f64::NAN,
        fp_constraint_residual: f64::NAN,
        scaling_kinetic_error: f64::NAN,
        scaling_coupling_error: f64::NAN,
        subadditivity: Vec::new(),
    };
    let fail = |b: &mut ResultBundle, label: &str, e: mfg_core::Error| b.failures.push(Failure { label: label.into(), error: e.to_string() });

    match adjointness() {
        Ok(err) => {
            summary.adjointness_error = err;
            b.assertions.push(Assertion::at_most("discrete_adjointness", err, 1e-10));
        }
        Err(e) => fail(b, "adjointness", e),
    }
    match fp_checks(&base) {
        Ok((mass, min_m, res)) => {
            summary.fp_mass_error = mass;
            summary.fp_min_density = min_m;
            summary.fp_constraint_residual = res;
            b.assertions.push(Assertion::at_most("fp_mass_conservation", mass, 1e-12));
            b.assertions.push(Assertion::at_least("fp_positivity", min_m, 0.0));
            b.assertions.push(Assertion::at_most("fp_constraint_residual", res, LINEAR_TOL));
        }
        Err(e) => fail(b, "fokker-planck", e),
    }
    match scaling(config, config.seed.wrapping_add(1)) {
        Ok((ek, ec)) => {
            summary.scaling_kinetic_error = ek;
            summary.scaling_coupling_error = ec;
            b.assertions.push(Assertion::at_most("kinetic_scaling", ek, 1e-12));
            b.assertions.push(Assertion::at_most("coupling_scaling", ec, 1e-12));
        }
        Err(e) => fail(b, "scaling", e),
    }

    let v = &config.verify;
    let model = config.model.with_epsilon(v.epsilon);
    let total = model.mass;
    match Grid::new(model.dim, v.half_width, v.points) {
        Ok(g) => {
            let mut fractions = v.mass_fractions.clone();
            fractions.sort_by(f64::total_cmp);
            let runs: Vec<_> = fractions.par_iter().map(|f| subadditivity_gap(&model, &g, &config.solver, f * total)).collect();
            let mut reports = Vec::new();
            for r in runs {
                match r {
                    Ok(r) => reports.push(r),
                    Err(e) => fail(b, "subadditivity", e),
                }
            }
            let central: Vec<&SubadditivityReport> =
                reports.iter().filter(|r| [0.25, 0.5, 0.75].iter().any(|f| (r.a - f * total).abs() < 1e-12 * total)).collect();
            let min_gap = central.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
            let mut a = Assertion::at_least("subadditivity_gap", min_gap, 0.0);
            a.detail = format!("smallest gap over {} central mass splits", central.len());
            a.passed &= !central.is_empty();
            b.assertions.push(a);
            let (trend, ends) = endpoint_trend(&reports, total);
            b.assertions.push(Assertion::holds("subadditivity_endpoints", trend, ends, "gaps shrink toward both ends; value is end gap over largest gap"));
            summary.subadditivity = reports;
        }
        Err(e) => fail(b, "subadditivity", e),
    }
    summary.checks = b.assertions.len();
    summary.passed = b.passed();
    b.report("verify", &summary);
}
