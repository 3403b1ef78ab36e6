use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use mfg_core::asymptotics::{
    concentration_report, fit_exponent, flattest_min_experiment, ground_state, hopf_cole_crosscheck, run_sweep, solve_nls, FlattestReport,
};
use mfg_core::mfg::{minimizer_verification, solve_mfg};
use mfg_core::{Grid, ModelParams, PotentialSpec, RescaledModel, ScalarField};

use crate::bundle::{relative_gap, Assertion, Failure, Figure, Profile, Provenance, ResultBundle, RunSummary, Series, SCHEMA_VERSION};
use crate::config::{Command, RunConfig};
use crate::verify;

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Runs `command` (falling back to the one named in the configuration, then
/// `solve`). Solver errors are recorded in the bundle rather than returned.
pub fn run(config: &RunConfig, command: Option<Command>) -> ResultBundle {
    let command = command.or(config.command).unwrap_or(Command::Solve);
    let mut echo = config.clone();
    echo.command = Some(command);
    let mut b = ResultBundle {
        schema_version: SCHEMA_VERSION,
        command,
        config: echo,
        runs: Vec::new(),
        sweep: Vec::new(),
        reports: BTreeMap::new(),
        assertions: Vec::new(),
        failures: Vec::new(),
        provenance: Provenance {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            threads: rayon::current_num_threads(),
            started_unix: now(),
            finished_unix: 0.0,
        },
        profiles: Vec::new(),
        figures: Vec::new(),
        failed_epsilons: Vec::new(),
    };
    let outcome = match command {
        Command::Solve => solve(config, &mut b),
        Command::Sweep => sweep(config, &mut b),
        Command::Flattest => flattest(config, &mut b),
        Command::Groundstate => groundstate(config, &mut b),
        Command::Hopfcole => hopfcole(config, &mut b),
        Command::Verify => {
            verify::suite(config, &mut b);
            Ok(())
        }
    };
    if let Err(e) = outcome {
        b.failures.push(Failure { label: command.name().into(), error: e.to_string() });
    }
    b.provenance.finished_unix = now();
    b
}

fn grid(config: &RunConfig) -> mfg_core::Result<Grid> {
    Grid::new(config.model.dim, config.grid.half_width, config.grid.points)
}

fn columns(fields: &[(&str, &ScalarField)]) -> Vec<(String, Vec<f64>)> {
    let Some((_, first)) = fields.first() else { return Vec::new() };
    let g = *first.grid();
    let mut out = Vec::new();
    for (k, axis) in ["x", "y"].iter().enumerate().take(g.dim()) {
        out.push((axis.to_string(), (0..g.node_count()).map(|i| g.point(i)[k]).collect()));
    }
    out.extend(fields.iter().map(|(n, f)| (n.to_string(), f.values().to_vec())));
    out
}

/// `(x, f)` along the first axis (the middle row in 2-D).
fn axis_curve(f: &ScalarField) -> Vec<(f64, f64)> {
    let g = *f.grid();
    (0..g.node_count()).filter(|&i| g.dim() == 1 || g.point(i)[1].abs() < 0.5 * g.spacing()).map(|i| (g.point(i)[0], f.values()[i])).collect()
}

fn figure(file: &str, title: &str, x_label: &str, y_label: &str, series: Vec<Series>) -> Figure {
    Figure { file: file.into(), title: title.into(), x_label: x_label.into(), y_label: y_label.into(), log_x: false, log_y: false, series }
}

fn line(label: impl Into<String>, points: Vec<(f64, f64)>) -> Series {
    Series { label: label.into(), points, markers: false }
}

fn solve(config: &RunConfig, b: &mut ResultBundle) -> mfg_core::Result<()> {
    let model = &config.model;
    let g = grid(config)?;
    let sol = solve_mfg(model, &g, &config.solver)?;
    b.runs.push(RunSummary::new("solve", &sol, model));
    b.assertions.push(Assertion::at_most("duality_gap_relative", relative_gap(&sol, model), config.checks.duality_tolerance));
    if config.checks.competitor_trials > 0 {
        let rep = minimizer_verification(&sol, model, &config.solver, config.checks.competitor_trials, config.seed)?;
        b.assertions.push(Assertion::holds(
            "minimizer_competitors",
            rep.all_passed(),
            rep.lowest_competitor - rep.solution_energy,
            format!("{} of {} competitors not below the solution energy", rep.passed, rep.trials),
        ));
        b.report("minimizer", &rep);
    }
    b.profiles.push(Profile { name: "solution".into(), columns: columns(&[("u", &sol.u), ("m", &sol.m)]) });
    b.figures.push(figure("density.svg", "equilibrium density", "x", "m", vec![line("m", axis_curve(&sol.m))]));
    b.figures.push(figure("value.svg", "value function", "x", "u", vec![line("u", axis_curve(&sol.u))]));
    Ok(())
}

fn sweep(config: &RunConfig, b: &mut ResultBundle) -> mfg_core::Result<()> {
    let model = &config.model;
    let checks = &config.checks;
    let entries = run_sweep(model, &config.epsilons, &config.sweep, &config.solver);
    let mut profiles = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match &e.outcome {
            Ok((rec, resc)) => {
                b.sweep.push(rec.clone());
                b.profiles.push(Profile { name: format!("rescaled_{i}"), columns: columns(&[("u_bar", &resc.u_bar), ("m_bar", &resc.m_bar)]) });
                profiles.push(line(format!("eps = {}", e.epsilon), axis_curve(&resc.m_bar)));
            }
            Err(err) => {
                b.failed_epsilons.push(e.epsilon);
                b.failures.push(Failure { label: format!("epsilon = {}", e.epsilon), error: err.to_string() });
            }
        }
    }
    let eta = config.sweep.eta_fraction * model.mass;
    let conc = concentration_report(&entries, model, eta);
    let recs = &b.sweep;
    let e_lam = RescaledModel::new(model).e_lam;
    if recs.len() >= 2 {
        let xs: Vec<f64> = recs.iter().map(|r| r.epsilon).collect();
        let ys: Vec<f64> = recs.iter().map(|r| r.lambda.abs()).collect();
        let (slope, r2) = fit_exponent(&xs, &ys)?;
        let n = xs.len() as f64;
        let intercept = (ys.iter().map(|y| y.ln()).sum::<f64>() - slope * xs.iter().map(|x| x.ln()).sum::<f64>()) / n;
        let mut a = Assertion::at_most("lambda_slope_deviation", (slope / -e_lam - 1.0).abs(), checks.slope_tolerance);
        a.detail = format!("fitted slope {slope:.6} (r² {r2:.6}) against {:.6}", -e_lam);
        b.assertions.push(a);
        let fit: Vec<(f64, f64)> = recs.iter().map(|r| (r.epsilon, (intercept + slope * r.epsilon.ln()).exp())).collect();
        b.figures.push(Figure {
            log_x: true,
            log_y: true,
            ..figure(
                "lambda_fit.svg",
                "|lambda| against epsilon",
                "epsilon",
                "|lambda|",
                vec![
                    Series { label: "measured".into(), points: recs.iter().map(|r| (r.epsilon, r.lambda.abs())).collect(), markers: true },
                    line(format!("slope {slope:.4}"), fit),
                ],
            )
        });
    }
    if !recs.is_empty() {
        let lt: Vec<f64> = recs.iter().map(|r| r.lambda_tilde).collect();
        let worst = lt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        b.assertions.push(Assertion::holds("lambda_tilde_negative", worst < 0.0, worst, "largest rescaled eigenvalue is negative"));
        b.assertions.push(Assertion::at_most("lambda_tilde_ratio", ratio(lt.iter().map(|x| x.abs())), checks.ratio_bound));
        b.assertions.push(Assertion::at_most("sup_m_bar_ratio", ratio(recs.iter().map(|r| r.sup_m_bar)), checks.ratio_bound));
        let gap = recs.iter().map(|r| r.duality_gap / (r.lambda * model.mass).abs()).fold(0.0, f64::max);
        b.assertions.push(Assertion::at_most("duality_gap_relative_max", gap, checks.duality_tolerance));
        b.assertions.push(Assertion::at_most("concentration_radius_ratio", conc.stabilization_ratio.unwrap_or(f64::INFINITY), checks.stabilization_bound));
        b.assertions.push(Assertion::holds(
            "x_eps_distance_trend",
            conc.distance_nonincreasing || conc.distance_shrink >= 2.0,
            conc.distances.last().map_or(f64::NAN, |d| d.1),
            "distance to argmin V non-increasing over the sweep, or shrinking at least 2x",
        ));
        b.figures.push(figure(
            "mass_fraction.svg",
            "rescaled mass inside B(x_eps, R)",
            "R",
            "mass",
            recs.iter().map(|r| Series { label: format!("eps = {}", r.epsilon), points: r.mass_fraction.clone(), markers: true }).collect(),
        ));
        b.figures.push(figure("profiles.svg", "rescaled densities", "y", "m_bar", profiles));
    }
    b.report("concentration", &conc);
    Ok(())
}

fn ratio(xs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = xs.fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

fn selection_assertions(b: &mut ResultBundle, prefix: &str, rep: &FlattestReport, bound: f64) {
    b.assertions.push(Assertion::holds(
        &format!("{prefix}selects_flattest_minimum"),
        rep.converges_to_expected,
        rep.selected.map_or(f64::NAN, |s| s as f64),
        format!("expected minimum {:?}, selected {:?}", rep.expected, rep.selected),
    ));
    b.assertions.push(Assertion::at_most(&format!("{prefix}final_distance"), rep.final_distance, bound));
}

fn flattest(config: &RunConfig, b: &mut ResultBundle) -> mfg_core::Result<()> {
    let model = &config.model;
    let fc = &config.flattest;
    let rep = flattest_min_experiment(model, &config.epsilons, &config.sweep, &config.solver, fc.equilibrium_tol)?;
    selection_assertions(b, "", &rep, config.checks.selection_distance);
    let mut series = vec![Series { label: "configured".into(), points: rep.entries.iter().map(|e| (e.epsilon, e.x_eps[0])).collect(), markers: true }];
    b.report("selection", &rep);
    if let PotentialSpec::PolynomialProduct { coef, minima, exponents } = &model.potential {
        if fc.swap_rerun && exponents.len() == 2 {
            let swapped =
                model.with_potential(PotentialSpec::PolynomialProduct { coef: *coef, minima: minima.clone(), exponents: vec![exponents[1], exponents[0]] });
            let rep2 = flattest_min_experiment(&swapped, &config.epsilons, &config.sweep, &config.solver, fc.equilibrium_tol)?;
            selection_assertions(b, "swapped_", &rep2, config.checks.selection_distance);
            series.push(Series { label: "exponents swapped".into(), points: rep2.entries.iter().map(|e| (e.epsilon, e.x_eps[0])).collect(), markers: true });
            b.report("selection_swapped", &rep2);
        }
    }
    b.figures.push(figure("x_eps.svg", "concentration point", "epsilon", "x_eps", series));
    Ok(())
}

fn groundstate(config: &RunConfig, b: &mut ResultBundle) -> mfg_core::Result<()> {
    let model = &config.model;
    let g = grid(config)?;
    let gs = &config.groundstate;
    let (rep, limit) = ground_state(model, &g, &gs.deltas, gs.b, &config.solver, config.checks.competitor_trials, config.seed)?;
    let free = model.with_potential(PotentialSpec::Power { coef: 0.0, b: gs.b });
    b.runs.push(RunSummary::new("limit", &limit, &free));
    let worst = rep.ratios.iter().cloned().fold(0.0, f64::max);
    b.assertions.push(Assertion::holds("ground_state_cauchy", rep.cauchy, worst, "successive distance ratios below 0.75"));
    b.assertions.push(Assertion::at_most("limit_hjb_residual", rep.limit_hjb_residual, rep.residual_threshold));
    b.assertions.push(Assertion::at_most("limit_fp_residual", rep.limit_fp_residual, rep.residual_threshold));
    match &rep.decay {
        Some(d) => {
            b.assertions.push(Assertion::at_least("decay_rate", d.c2, f64::MIN_POSITIVE));
            b.assertions.push(Assertion::holds("decay_envelope", d.envelope_holds, d.c1_required / d.c1, "envelope with 1.1x inflation"));
        }
        None => b.assertions.push(Assertion::holds("decay_rate", false, f64::NAN, "decay fit unavailable")),
    }
    if let Some(c) = &rep.competitors {
        b.assertions.push(Assertion::holds(
            "minimizer_competitors",
            c.all_passed(),
            c.lowest_competitor - c.solution_energy,
            "limit not beaten by any competitor",
        ));
    }
    b.profiles.push(Profile { name: "limit".into(), columns: columns(&[("u", &limit.u), ("m", &limit.m)]) });
    b.figures.push(figure("ground_state.svg", "potential-free limit", "x", "m", vec![line("m", axis_curve(&limit.m))]));
    b.report("ground_state", &rep);
    Ok(())
}

fn hopfcole(config: &RunConfig, b: &mut ResultBundle) -> mfg_core::Result<()> {
    let model: &ModelParams = &config.model;
    let g = grid(config)?;
    let sol = solve_mfg(model, &g, &config.solver)?;
    b.runs.push(RunSummary::new("mfg", &sol, model));
    let rep = hopf_cole_crosscheck(&sol, model, &config.solver, &config.nls)?;
    let tol = config.checks.hopf_cole_tolerance;
    b.assertions.push(Assertion::at_most("hopf_cole_density_gap", rep.density_gap_relative, tol));
    b.assertions.push(Assertion::at_most("hopf_cole_lambda_gap", rep.lambda_gap_relative, tol));
    let nls = solve_nls(model, &g, &config.solver, &config.nls)?;
    b.profiles.push(Profile { name: "hopf_cole".into(), columns: columns(&[("m", &sol.m), ("v_squared", &nls.density)]) });
    b.figures.push(figure(
        "hopf_cole.svg",
        "density against squared eigenfunction",
        "x",
        "density",
        vec![line("m", axis_curve(&sol.m)), line("v^2", axis_curve(&nls.density))],
    ));
    b.report("hopf_cole", &rep);
    Ok(())
}
