//! Vanishing-viscosity experiments: blow-up rescaling around `x_ε`,
//! ε-sweeps, concentration and decay diagnostics, selection among several
//! minima of the potential, potential-free ground states and the
//! Hopf–Cole cross-check against a nonlinear eigenvalue solver.

use serde::{Deserialize, Serialize};

use crate::energy::{kinetic_moment, EnergyBreakdown};
use crate::error::{Error, Result};
use crate::fokker_planck::drift_from_value;
use crate::grid::{laplacian, Grid, Point, ScalarField, MAX_DIM};
use crate::hjb::{hjb_residual, HjbProblem};
use crate::linalg::BandMatrix;
use crate::mfg::{coupling_rhs, minimizer_verification, multi_start, solve_mfg_from, Initial, MfgSolution, MinimizerReport, SolverConfig};
use crate::model::{ModelParams, PotentialSpec, RescaledModel};

#[derive(Debug, Clone)]
pub struct RescaledSolution {
    pub u_bar: ScalarField,
    pub m_bar: ScalarField,
    pub lambda_tilde: f64,
    /// Physical centre `x_ε`.
    pub shift: Point,
    /// `M − ∫ m̄` on the window.
    pub truncation_loss: f64,
}

/// Samples `(u, m)` around `x_ε = argmin u` on a window of rescaled
/// half-width about `window`, with spacing `h / ε^{e_len}`.
pub fn rescale_solution(sol: &MfgSolution, model: &ModelParams, window: f64) -> Result<RescaledSolution> {
    let g = *sol.grid();
    let rm = RescaledModel::new(model);
    let s = rm.length_scale();
    let hy = g.spacing() / s;
    let half = ((window / hy).ceil() as usize).max(1);
    let gy = Grid::new(g.dim(), half as f64 * hy, 2 * half + 1)?;
    let centre = sol.argmin_point();
    let u0 = sol.u.values()[sol.argmin];
    let eps = model.epsilon;
    let (fm, fu) = (eps.powf(rm.e_mass), eps.powf(rm.e_u));
    let l = g.half_width();
    let to_x = |y: &Point| -> Option<Point> {
        let mut x = [0.0; MAX_DIM];
        for k in 0..g.dim() {
            x[k] = centre[k] + s * y[k];
            if x[k].abs() > l * (1.0 + 1e-12) {
                return None;
            }
            x[k] = x[k].clamp(-l, l);
        }
        Some(x)
    };
    let m_bar = ScalarField::from_fn(gy, |y| to_x(y).and_then(|x| sol.m.sample(&x)).map_or(0.0, |v| fm * v));
    let u_bar = ScalarField::from_fn(gy, |y| {
        let mut x = [0.0; MAX_DIM];
        for k in 0..g.dim() {
            x[k] = (centre[k] + s * y[k]).clamp(-l, l);
        }
        fu * (sol.u.sample(&x).unwrap_or(u0) - u0)
    });
    let truncation_loss = model.mass - m_bar.integrate();
    Ok(RescaledSolution { u_bar, m_bar, lambda_tilde: eps.powf(rm.e_lam) * sol.lambda, shift: centre, truncation_loss })
}

/// Least-squares slope of `log y` against `log x` and its `r²`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidParameter("need at least two paired samples".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("samples must be positive and finite".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy <= 1e-28 * (1.0 + my * my) { 1.0 } else { (sxy * sxy / (sxx * syy)).min(1.0) };
    Ok((slope, r2))
}

/// `∫_{|x − c| ≤ r} m`: exact for the piecewise-linear interpolant in 1-d,
/// node quadrature in 2-d.
pub fn ball_mass(m: &ScalarField, centre: &Point, r: f64) -> f64 {
    let g = m.grid();
    let v = m.values();
    if g.dim() == 1 {
        let (a, b) = (centre[0] - r, centre[0] + r);
        let mut total = 0.0;
        for i in 0..g.points_per_axis() - 1 {
            let (x0, x1) = (g.coord(i), g.coord(i + 1));
            let (lo, hi) = (a.max(x0), b.min(x1));
            if hi <= lo {
                continue;
            }
            let at = |x: f64| v[i] + (v[i + 1] - v[i]) * (x - x0) / (x1 - x0);
            total += (hi - lo) * 0.5 * (at(lo) + at(hi));
        }
        total
    } else {
        (0..g.node_count())
            .filter(|&i| {
                let p = g.point(i);
                (p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2) <= r * r
            })
            .map(|i| g.node_weight(i) * v[i])
            .sum()
    }
}

/// Smallest `R` with `∫_{|x−c|≤R} m ≥ target`, or `None` if unreachable.
pub fn radius_for_mass(m: &ScalarField, centre: &Point, target: f64) -> Option<f64> {
    if target <= 0.0 {
        return Some(0.0);
    }
    let g = m.grid();
    let mut hi = 2.0 * g.half_width() * (g.dim() as f64).sqrt();
    if ball_mass(m, centre, hi) < target {
        return None;
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ball_mass(m, centre, mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub c1: f64,
    pub c2: f64,
    pub r2: f64,
    /// Whether `m̄ ≤ 1.1 c₁ e^{−c₂|y|}` holds at every node.
    pub envelope_holds: bool,
    /// `max m̄ e^{c₂|y|}`, the smallest admissible prefactor for the fitted rate.
    pub c1_required: f64,
}

/// Log-linear fit of the shell maxima of `m̄` on the outer half of the window.
pub fn decay_fit(m_bar: &ScalarField) -> Result<DecayFit> {
    let g = m_bar.grid();
    let h = g.spacing();
    let half = g.half_width();
    let nb = (half / h).round() as usize + 1;
    let mut shells = vec![0.0f64; nb + 1];
    let radius = |i: usize| {
        let p = g.point(i);
        (p[0] * p[0] + p[1] * p[1]).sqrt()
    };
    for i in 0..g.node_count() {
        let b = (radius(i) / h).round() as usize;
        if b <= nb {
            shells[b] = shells[b].max(m_bar.values()[i]);
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = shells.iter().enumerate().map(|(b, v)| (b as f64 * h, *v)).filter(|(r, v)| *r >= 0.5 * half && *v > 1e-300).unzip();
    if xs.len() < 3 {
        return Err(Error::Domain("too few positive shells on the outer half".into()));
    }
    let n = xs.len() as f64;
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let c2 = -slope;
    let c1 = (my - slope * mx).exp();
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    let c1_required = (0..g.node_count()).map(|i| m_bar.values()[i] * (c2 * radius(i)).exp()).fold(0.0, f64::max);
    Ok(DecayFit { c1, c2, r2, envelope_holds: c1_required <= 1.1 * c1, c1_required })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    /// Physical half-width of the box.
    pub half_width: f64,
    pub h_max: f64,
    /// Target rescaled spacing: `h = min(h_max, rescaled_spacing · ε^{e_len})`.
    pub rescaled_spacing: f64,
    /// `n − 1` is kept a multiple of this.
    pub align: usize,
    /// Rescaled half-width of the profile window.
    pub window: f64,
    /// Rescaled radii at which the mass fraction is recorded.
    pub radii: Vec<f64>,
    /// `η / M` for the concentration radius.
    pub eta_fraction: f64,
    pub warm_start: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            half_width: 2.0,
            h_max: 0.02,
            rescaled_spacing: 0.1,
            align: 2,
            window: 60.0,
            radii: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            eta_fraction: 0.1,
            warm_start: true,
        }
    }
}

impl SweepSettings {
    pub fn grid_for(&self, model: &ModelParams) -> Result<Grid> {
        let s = RescaledModel::new(model).length_scale();
        Grid::with_max_spacing(model.dim, self.half_width, self.h_max.min(self.rescaled_spacing * s), self.align)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub epsilon: f64,
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub x_eps: Vec<f64>,
    pub distance_to_minima: f64,
    /// `(R, ∫_{|y|≤R} m̄)` samples.
    pub mass_fraction: Vec<(f64, f64)>,
    /// Smallest rescaled radius holding mass `M − η`.
    pub r_eta: Option<f64>,
    pub sup_m_bar: f64,
    pub energy: EnergyBreakdown,
    pub decay: Option<DecayFit>,
    pub duality_gap: f64,
    pub optimality_residual: f64,
    pub iterations: usize,
    pub grid_points: usize,
    pub truncation_loss: f64,
    /// `∫ m |w/m|^γ'`.
    pub kinetic_moment: f64,
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub epsilon: f64,
    pub outcome: std::result::Result<(SweepRecord, RescaledSolution), Error>,
}

impl SweepEntry {
    pub fn record(&self) -> Option<&SweepRecord> {
        self.outcome.as_ref().ok().map(|(r, _)| r)
    }

    pub fn profile(&self) -> Option<&RescaledSolution> {
        self.outcome.as_ref().ok().map(|(_, p)| p)
    }
}

/// Builds the record of one converged solve.
pub fn sweep_record(sol: &MfgSolution, model: &ModelParams, settings: &SweepSettings) -> Result<(SweepRecord, RescaledSolution)> {
    let resc = rescale_solution(sol, model, settings.window)?;
    let origin = [0.0; MAX_DIM];
    let mass_fraction = settings.radii.iter().map(|&r| (r, ball_mass(&resc.m_bar, &origin, r))).collect();
    let x_eps: Vec<f64> = resc.shift[..model.dim].to_vec();
    let pair = sol.pair(model.epsilon, model.mass)?;
    Ok((
        SweepRecord {
            epsilon: model.epsilon,
            lambda: sol.lambda,
            lambda_tilde: resc.lambda_tilde,
            distance_to_minima: model.potential.distance_to_minima(&x_eps),
            x_eps,
            mass_fraction,
            r_eta: radius_for_mass(&resc.m_bar, &origin, model.mass * (1.0 - settings.eta_fraction)),
            sup_m_bar: resc.m_bar.max(),
            energy: sol.energy,
            decay: decay_fit(&resc.m_bar).ok(),
            duality_gap: sol.duality_gap,
            optimality_residual: sol.optimality_residual,
            iterations: sol.fixedpoint_iterations,
            grid_points: sol.grid().node_count(),
            truncation_loss: resc.truncation_loss,
            kinetic_moment: kinetic_moment(&pair, &model.hamiltonian),
        },
        resc,
    ))
}

/// Density on `grid` obtained by blowing a rescaled profile back down at `model.epsilon`.
fn unrescale(profile: &RescaledSolution, model: &ModelParams, grid: &Grid) -> Option<ScalarField> {
    let rm = RescaledModel::new(model);
    let s = rm.length_scale();
    let amp = model.epsilon.powf(-rm.e_mass);
    let m = ScalarField::from_fn(*grid, |x| {
        let mut y = [0.0; MAX_DIM];
        for k in 0..grid.dim() {
            y[k] = (x[k] - profile.shift[k]) / s;
        }
        profile.m_bar.sample(&y).map_or(0.0, |v| amp * v.max(0.0))
    });
    (m.integrate() > 1e-3 * model.mass).then_some(m)
}

/// One solve per ε; each warm-starts from the previous rescaled profile
/// when `settings.warm_start` is set. Failures are kept per entry.
pub fn run_sweep(template: &ModelParams, epsilons: &[f64], settings: &SweepSettings, config: &SolverConfig) -> Vec<SweepEntry> {
    let mut out = Vec::with_capacity(epsilons.len());
    let mut last: Option<RescaledSolution> = None;
    for &eps in epsilons {
        let model = template.with_epsilon(eps);
        let outcome = (|| {
            model.validate()?;
            let grid = settings.grid_for(&model)?;
            let init = match last.as_ref().filter(|_| settings.warm_start).and_then(|p| unrescale(p, &model, &grid)) {
                Some(m) => Initial::Density(m),
                None => Initial::default(),
            };
            let sol = solve_mfg_from(&model, &grid, config, &init)?;
            sweep_record(&sol, &model, settings)
        })();
        last = outcome.as_ref().ok().map(|(_, p)| p.clone());
        out.push(SweepEntry { epsilon: eps, outcome });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub eta: f64,
    /// `(ε, R)` with `R` the smallest rescaled radius holding `M − η`.
    pub radii: Vec<(f64, Option<f64>)>,
    /// `R` ratio across the two smallest ε.
    pub stabilization_ratio: Option<f64>,
    pub stabilizes: bool,
    /// `(ε, dist(x_ε, argmin V))` in sweep order.
    pub distances: Vec<(f64, f64)>,
    pub distance_nonincreasing: bool,
    /// First over last distance; infinite when the last is zero.
    pub distance_shrink: f64,
}

pub fn concentration_report(entries: &[SweepEntry], model: &ModelParams, eta: f64) -> ConcentrationReport {
    let mut ok: Vec<(&SweepRecord, &RescaledSolution)> = entries.iter().filter_map(|e| e.outcome.as_ref().ok().map(|(r, p)| (r, p))).collect();
    ok.sort_by(|a, b| b.0.epsilon.total_cmp(&a.0.epsilon));
    let origin = [0.0; MAX_DIM];
    let radii: Vec<(f64, Option<f64>)> = ok.iter().map(|(r, p)| (r.epsilon, radius_for_mass(&p.m_bar, &origin, model.mass - eta))).collect();
    let stabilization_ratio = match radii.as_slice() {
        [.., (_, Some(a)), (_, Some(b))] => Some(if *a == 0.0 && *b == 0.0 { 1.0 } else { a.max(*b) / a.min(*b) }),
        _ => None,
    };
    let distances: Vec<(f64, f64)> = ok.iter().map(|(r, _)| (r.epsilon, r.distance_to_minima)).collect();
    let distance_nonincreasing = distances.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
    let distance_shrink = match (distances.first(), distances.last()) {
        (Some(a), Some(b)) if b.1 > 0.0 => a.1 / b.1,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    };
    ConcentrationReport {
        eta,
        stabilizes: stabilization_ratio.is_some_and(|r| r <= 1.5),
        radii,
        stabilization_ratio,
        distances,
        distance_nonincreasing,
        distance_shrink,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlattestEntry {
    pub epsilon: f64,
    pub x_eps: Vec<f64>,
    /// Index of the minimum nearest to `x_ε`.
    pub nearest_minimum: usize,
    pub distance: f64,
    pub energy: f64,
    /// Energies of the multi-start equilibria, lowest first.
    pub candidates: Vec<f64>,
    /// Starts whose fixed-point iteration did not settle.
    pub failed_starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlattestReport {
    pub minima: Vec<Vec<f64>>,
    pub exponents: Vec<f64>,
    /// Minimum with the strictly largest exponent; `None` when tied.
    pub expected: Option<usize>,
    pub entries: Vec<FlattestEntry>,
    /// Nearest minimum at the smallest ε.
    pub selected: Option<usize>,
    pub final_distance: f64,
    pub distance_monotone: bool,
    pub distance_shrink: f64,
    pub undetermined: bool,
    pub converges_to_expected: bool,
}

/// Multi-start solves (one per minimum plus the origin) per ε, keeping the
/// lowest-energy equilibrium, and tracks which minimum attracts `x_ε`.
pub fn flattest_min_experiment(template: &ModelParams, epsilons: &[f64], settings: &SweepSettings, config: &SolverConfig, tol: f64) -> Result<FlattestReport> {
    let (minima, exponents) = match &template.potential {
        PotentialSpec::PolynomialProduct { minima, exponents, .. } => (minima.clone(), exponents.clone()),
        _ => return Err(Error::InvalidParameter("selection experiment needs a polynomial-product potential".into())),
    };
    let best = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let top: Vec<usize> = (0..exponents.len()).filter(|&j| exponents[j] == best).collect();
    let expected = (top.len() == 1).then(|| top[0]);
    let mut entries = Vec::new();
    for &eps in epsilons {
        let model = template.with_epsilon(eps);
        let grid = settings.grid_for(&model)?;
        let mut inits: Vec<Initial> = minima
            .iter()
            .map(|c| {
                let mut p = [0.0; MAX_DIM];
                p[..c.len()].copy_from_slice(c);
                Initial::Gaussian { center: p, width: None }
            })
            .collect();
        inits.push(Initial::default());
        let runs = multi_start(&model, &grid, config, &inits);
        let failed_starts = runs.iter().filter(|r| r.is_err()).count();
        let mut sols = Vec::new();
        let mut last_err = None;
        for r in runs {
            match r {
                Ok(s) => sols.push(s),
                Err(e) => last_err = Some(e),
            }
        }
        if sols.is_empty() {
            return Err(last_err.unwrap_or_else(|| Error::Domain("no starting points".into())));
        }
        let reps = crate::mfg::distinct_equilibria(&sols, tol);
        let chosen = &sols[reps[0]];
        let x = chosen.argmin_point()[..model.dim].to_vec();
        let dists: Vec<f64> = minima.iter().map(|c| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).collect();
        let nearest = (0..dists.len()).min_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap_or(0);
        let target = expected.unwrap_or(nearest);
        entries.push(FlattestEntry {
            epsilon: eps,
            x_eps: x,
            nearest_minimum: nearest,
            distance: dists[target],
            energy: chosen.energy.total,
            candidates: reps.iter().map(|&i| sols[i].energy.total).collect(),
            failed_starts,
        });
    }
    let selected = entries.last().map(|e| e.nearest_minimum);
    let final_distance = entries.last().map_or(f64::INFINITY, |e| e.distance);
    let distance_monotone = entries.windows(2).all(|w| w[1].distance <= w[0].distance + 1e-12);
    let distance_shrink = match (entries.first(), entries.last()) {
        (Some(a), Some(b)) if b.distance > 0.0 => a.distance / b.distance,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    };
    let converges_to_expected = expected.is_some() && selected == expected && (distance_monotone || distance_shrink >= 2.0);
    Ok(FlattestReport {
        minima,
        exponents,
        expected,
        entries,
        selected,
        final_distance,
        distance_monotone,
        distance_shrink,
        undetermined: expected.is_none(),
        converges_to_expected,
    })
}

/// Restriction of `f` to the centred box of half-width `half_width`, on the same spacing.
pub fn restrict(f: &ScalarField, half_width: f64) -> Result<ScalarField> {
    let g = *f.grid();
    let h = g.spacing();
    let k = (half_width / h).round() as usize;
    if k == 0 || half_width > g.half_width() + 0.5 * h {
        return Err(Error::InvalidParameter(format!("cannot restrict a box of half-width {} to {half_width}", g.half_width())));
    }
    let sub = Grid::new(g.dim(), k as f64 * h, 2 * k + 1)?;
    Ok(ScalarField::from_fn(sub, |p| g.nearest_node(p).map_or(0.0, |i| f.values()[i])))
}

/// Shifts `f` by whole nodes so that node `centre` lands on the middle node.
pub fn recenter(f: &ScalarField, centre: usize) -> ScalarField {
    let g = *f.grid();
    let n = g.points_per_axis() as isize;
    let mid = (n - 1) / 2;
    let c = g.multi_index(centre);
    let v = f.values();
    ScalarField::from_fn(g, |p| {
        let Some(i) = g.nearest_node(p) else { return 0.0 };
        let idx = g.multi_index(i);
        let mut src = [0usize; MAX_DIM];
        for k in 0..g.dim() {
            let s = idx[k] as isize + c[k] as isize - mid;
            if s < 0 || s >= n {
                return 0.0;
            }
            src[k] = s as usize;
        }
        v[g.flat_index(src)]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundStateReport {
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// L¹ distances between successive recentered densities.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub cauchy: bool,
    /// Distance from the last confined density to the limit.
    pub limit_distance: f64,
    pub lambda_limit: f64,
    pub sup_m_limit: f64,
    /// Relative residuals of the limit system.
    pub limit_hjb_residual: f64,
    pub limit_fp_residual: f64,
    pub residual_threshold: f64,
    pub residual_ok: bool,
    pub decay: Option<DecayFit>,
    pub competitors: Option<MinimizerReport>,
}

/// Solves with confinement `δ|x|^b` for each δ, then the limit `δ = 0`
/// warm-started from the last; coupling is evaluated locally throughout.
pub fn ground_state(
    template: &ModelParams,
    grid: &Grid,
    deltas: &[f64],
    b: f64,
    config: &SolverConfig,
    competitor_trials: usize,
    seed: u64,
) -> Result<(GroundStateReport, MfgSolution)> {
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::InvalidParameter("confinement strengths must be positive".into()));
    }
    let config = SolverConfig { mollified: false, ..*config };
    let mut lambdas = Vec::new();
    let mut centred: Vec<ScalarField> = Vec::new();
    let mut init = Initial::default();
    for &d in deltas {
        let model = template.with_potential(PotentialSpec::Power { coef: d, b });
        let sol = solve_mfg_from(&model, grid, &config, &init)?;
        lambdas.push(sol.lambda);
        centred.push(recenter(&sol.m, sol.argmin));
        init = Initial::Warm { m: sol.m.clone(), u: sol.u.clone(), lambda: sol.lambda };
    }
    let free = template.with_potential(PotentialSpec::Power { coef: 0.0, b });
    let limit = solve_mfg_from(&free, grid, &config, &init)?;
    let limit_centred = recenter(&limit.m, limit.argmin);
    let distances: Vec<f64> = centred.windows(2).map(|w| w[0].l1_distance(&w[1])).collect::<Result<_>>()?;
    let ratios: Vec<f64> = distances.windows(2).map(|w| w[1] / w[0]).collect();
    let cauchy = ratios.iter().all(|r| *r < 0.75);
    let limit_distance = match centred.last() {
        Some(last) => last.l1_distance(&limit_centred)?,
        None => 0.0,
    };

    let v = free.potential.field(grid);
    let rhs = coupling_rhs(&free, None, &limit.m, &v)?;
    let scale = 1.0 + rhs.max_abs();
    let problem = HjbProblem { rhs, epsilon: free.epsilon, hamiltonian: free.hamiltonian };
    let limit_hjb_residual = hjb_residual(&problem, config.hjb.scheme, &limit.u, limit.lambda)?.max_abs() / scale;
    let pair = limit.pair(free.epsilon, free.mass)?;
    let limit_fp_residual = crate::energy::constraint_residual(&pair).relative();
    let residual_threshold = 10.0 * config.hjb.tol.max(config.fp_tol);

    // The reflecting wall flattens the tail near the box edge.
    let decay = restrict(&limit_centred, 0.5 * grid.half_width()).and_then(|m| decay_fit(&m)).ok();
    let competitors = if competitor_trials > 0 { Some(minimizer_verification(&limit, &free, &config, competitor_trials, seed)?) } else { None };
    Ok((
        GroundStateReport {
            deltas: deltas.to_vec(),
            lambdas,
            distances,
            ratios,
            cauchy,
            limit_distance,
            lambda_limit: limit.lambda,
            sup_m_limit: limit.m.max(),
            limit_hjb_residual,
            limit_fp_residual,
            residual_threshold,
            residual_ok: limit_hjb_residual <= residual_threshold && limit_fp_residual <= residual_threshold,
            decay,
            competitors,
        },
        limit,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlsOptions {
    /// Under-relaxation on `v²` between frozen-coefficient solves.
    pub relaxation: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self { relaxation: 0.5, tol: 1e-11, max_iters: 5000 }
    }
}

#[derive(Debug, Clone)]
pub struct NlsSolution {
    /// `v²`, normalized to mass `M`.
    pub density: ScalarField,
    pub lambda: f64,
    pub iterations: usize,
}

/// Ground state of `−2ε²Δv + (V + f(v²))v = λv`, `∫v² = M`, with the same
/// coupling map (local or mollified) as the MFG solver.
pub fn solve_nls(model: &ModelParams, grid: &Grid, config: &SolverConfig, opts: &NlsOptions) -> Result<NlsSolution> {
    let g = *grid;
    let n = g.node_count();
    let mollifier = config.mollifier(grid)?;
    let v_field = model.potential.field(grid);
    let kdiff = 2.0 * model.epsilon * model.epsilon;
    let h = g.spacing();
    let bw = g.stride(g.dim() - 1);
    let mut lap = BandMatrix::zeros(n, bw, bw);
    for i in 0..n {
        let idx = g.multi_index(i);
        for k in 0..g.dim() {
            let s = g.stride(k);
            let ik = idx[k];
            let w = if ik == 0 || ik + 1 == g.points_per_axis() { 0.5 * h } else { h };
            let c = kdiff / (h * w);
            if ik > 0 {
                lap.add(i, i - s, -c);
                lap.add(i, i, c);
            }
            if ik + 1 < g.points_per_axis() {
                lap.add(i, i + s, -c);
                lap.add(i, i, c);
            }
        }
    }
    let weights = g.node_weights();
    let norm = |x: &[f64]| -> f64 { x.iter().zip(&weights).map(|(a, w)| w * a * a).sum::<f64>() };
    let width = RescaledModel::new(model).length_scale().max(3.0 * h).min(0.25 * g.half_width());
    let mut m = ScalarField::from_fn(g, |p| {
        let d2: f64 = (0..g.dim()).map(|k| p[k] * p[k]).sum();
        (-0.5 * d2 / (width * width)).exp()
    });
    let t = m.integrate();
    m = m.map(|x| x * model.mass / t);
    let mut lambda = f64::NAN;
    let mut history = Vec::new();
    for it in 1..=opts.max_iters {
        let pot = coupling_rhs(model, mollifier.as_ref(), &m, &v_field)?;
        let mut a = lap.clone();
        for i in 0..n {
            a.add(i, i, pot.values()[i]);
        }
        let mut v: Vec<f64> = m.values().iter().map(|x| x.max(0.0).sqrt()).collect();
        let apply = |x: &[f64]| {
            let mut y = vec![0.0; n];
            a.matvec(x, &mut y);
            y
        };
        let rq = |x: &[f64]| -> f64 {
            let ax = apply(x);
            x.iter().zip(&ax).zip(&weights).map(|((a, b), w)| w * a * b).sum::<f64>() / norm(x)
        };
        // Below the Gershgorin bound the shifted operator is an M-matrix and
        // inverse iteration picks the ground state; Rayleigh shifts take over
        // once the density has settled.
        let floor = pot.min() - 1.0;
        let mut sigma = rq(&v);
        let start = v.clone();
        let mut rayleigh = history.last().is_some_and(|c: &f64| *c < 1e-4);
        let mut k = 0;
        while k < 3 {
            let mut shifted = a.clone();
            let shift = if rayleigh { sigma - 1e-8 * (1.0 + sigma.abs()) } else { floor };
            for i in 0..n {
                shifted.add(i, i, -shift);
            }
            let lu = shifted.factor()?;
            lu.solve_in_place(&mut v);
            let s = norm(&v).sqrt();
            let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            v.iter_mut().for_each(|x| *x *= sign / s);
            let peak = v.iter().cloned().fold(0.0, f64::max);
            if rayleigh && v.iter().any(|x| *x < -1e-10 * peak) {
                rayleigh = false;
                v.clone_from(&start);
                k = 0;
                continue;
            }
            sigma = rq(&v);
            k += 1;
        }
        let new_m = ScalarField::from_raw(g, v.iter().map(|x| model.mass * x * x).collect());
        let change = new_m.zip_map(&m, |a, b| (a - b).abs())?.max() / new_m.max();
        let dl = (sigma - lambda).abs();
        lambda = sigma;
        history.push(change);
        if change < opts.tol && dl < opts.tol * (1.0 + lambda.abs()) {
            return Ok(NlsSolution { density: new_m, lambda, iterations: it });
        }
        m = m.zip_map(&new_m, |a, b| (1.0 - opts.relaxation) * a + opts.relaxation * b)?;
    }
    let residual = history.last().copied().unwrap_or(f64::NAN);
    Err(Error::NoConvergence { solver: "nls", iterations: opts.max_iters, residual, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopfColeReport {
    pub lambda_mfg: f64,
    pub lambda_nls: f64,
    pub lambda_gap_relative: f64,
    /// `‖v² − m‖_∞ / max m`.
    pub density_gap_relative: f64,
    /// Oscillation of `−ε log(m/max m) − (u − min u)` where `m ≥ 1e−6 max m`.
    pub hopf_cole_spread: f64,
    pub nls_iterations: usize,
}

/// Compares a converged MFG solution with the nonlinear eigenvalue solve.
pub fn hopf_cole_crosscheck(sol: &MfgSolution, model: &ModelParams, config: &SolverConfig, opts: &NlsOptions) -> Result<HopfColeReport> {
    if model.hamiltonian.gamma != 2.0 || model.hamiltonian.c_h != 0.5 {
        return Err(Error::InvalidParameter("Hopf–Cole transform needs H(p) = |p|²/2".into()));
    }
    let g = *sol.grid();
    let nls = solve_nls(model, &g, config, opts)?;
    let peak = sol.m.max();
    let density_gap_relative = nls.density.zip_map(&sol.m, |a, b| (a - b).abs())?.max() / peak;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let umin = sol.u.min();
    for (m, u) in sol.m.values().iter().zip(sol.u.values()) {
        if *m >= 1e-6 * peak {
            let d = -model.epsilon * (m / peak).ln() - (u - umin);
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    Ok(HopfColeReport {
        lambda_mfg: sol.lambda,
        lambda_nls: nls.lambda,
        lambda_gap_relative: (nls.lambda - sol.lambda).abs() / sol.lambda.abs().max(f64::MIN_POSITIVE),
        density_gap_relative,
        hopf_cole_spread: hi - lo,
        nls_iterations: nls.iterations,
    })
}

/// Residual of the rescaled system for a rescaled profile, relative to
/// `1 + max |rhs|`; the coupling follows `config` at the rescaled spacing.
pub fn rescaled_residual(resc: &RescaledSolution, model: &ModelParams, config: &SolverConfig) -> Result<f64> {
    let params = RescaledModel::new(model).params();
    let g = *resc.m_bar.grid();
    let mollifier = config.mollifier(&g)?;
    let v = params.potential.field(&g);
    let rhs = coupling_rhs(&params, mollifier.as_ref(), &resc.m_bar, &v)?;
    let scale = 1.0 + rhs.max_abs();
    let problem = HjbProblem { rhs, epsilon: 1.0, hamiltonian: params.hamiltonian };
    let r = hjb_residual(&problem, config.hjb.scheme, &resc.u_bar, resc.lambda_tilde)?;
    // The window edge is an artificial boundary; only the interior is checked.
    let half = g.half_width();
    let interior =
        (0..g.node_count()).filter(|&i| g.point(i).iter().take(g.dim()).all(|c| c.abs() < 0.5 * half)).map(|i| r.values()[i].abs()).fold(0.0, f64::max);
    Ok(interior / scale)
}

/// `−εΔm − div(m ∇H(∇u))` in the strong form at the nodes, for diagnostics.
pub fn fp_strong_residual(u: &ScalarField, m: &ScalarField, model: &ModelParams) -> Result<ScalarField> {
    let drift = drift_from_value(u, &model.hamiltonian);
    let w = crate::fokker_planck::flux_field(m, &drift, model.epsilon);
    let div = crate::grid::divergence(&w);
    laplacian(m).zip_map(&div, |l, d| -model.epsilon * l + d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::solve_mfg;
    use crate::model::{CouplingSpec, HamiltonianSpec};

    fn model(c_h: f64, c_f: f64, eps: f64, pot: PotentialSpec) -> ModelParams {
        ModelParams::new(1, HamiltonianSpec::new(c_h, 2.0).unwrap(), CouplingSpec::new(c_f, 1.0).unwrap(), pot, 1.0, eps).unwrap()
    }

    #[test]
    fn exponents_are_coherent() {
        let m = model(1.0, 1.0, 0.3, PotentialSpec::Power { coef: 1.0, b: 2.0 });
        let r = RescaledModel::new(&m);
        assert_eq!((r.e_len, r.e_mass, r.e_lam, r.e_u), (2.0, 2.0, 2.0, -1.0));
        assert_eq!(r.e_mass, m.dim as f64 * r.e_len);
        assert_eq!(r.e_lam, m.coupling.alpha * r.e_mass);
    }

    #[test]
    fn rescaling_at_unit_epsilon_is_identity() {
        let m = model(1.0, 1.0, 1.0, PotentialSpec::Power { coef: 1.0, b: 2.0 });
        let g = Grid::new(1, 10.0, 201).unwrap();
        let s = solve_mfg(&m, &g, &SolverConfig::default()).unwrap();
        let r = rescale_solution(&s, &m, 10.0).unwrap();
        assert_eq!(r.shift[0], 0.0);
        assert_eq!(r.lambda_tilde, s.lambda);
        for (a, b) in r.m_bar.values().iter().zip(s.m.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(r.truncation_loss.abs() < 1e-10);
    }

    #[test]
    fn rescaling_preserves_mass_and_residual() {
        let m = model(1.0, 1.0, 0.2, PotentialSpec::Power { coef: 1.0, b: 2.0 });
        let settings = SweepSettings::default();
        let g = settings.grid_for(&m).unwrap();
        let cfg = SolverConfig::default();
        let s = solve_mfg(&m, &g, &cfg).unwrap();
        let r = rescale_solution(&s, &m, 40.0).unwrap();
        assert!(r.truncation_loss.abs() <= 1e-6 * m.mass, "{}", r.truncation_loss);
        let orig = hjb_residual(
            &HjbProblem {
                rhs: coupling_rhs(&m, cfg.mollifier(&g).unwrap().as_ref(), &s.m, &m.potential.field(&g)).unwrap(),
                epsilon: m.epsilon,
                hamiltonian: m.hamiltonian,
            },
            cfg.hjb.scheme,
            &s.u,
            s.lambda,
        )
        .unwrap()
        .max_abs();
        let resc = rescaled_residual(&r, &m, &cfg).unwrap();
        assert!(resc <= 10.0 * orig.max(cfg.hjb.tol), "{resc} {orig}");
    }

    #[test]
    fn exponent_fit_cases() {
        let xs = [0.2, 0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| x.powi(-2)).collect();
        let (s, r2) = fit_exponent(&xs, &ys).unwrap();
        assert!((s + 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let (s, _) = fit_exponent(&xs, &[3.0; 4]).unwrap();
        assert!(s.abs() < 1e-12);
        assert!(fit_exponent(&xs, &[1.0, -1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn decay_fit_cases() {
        let g = Grid::new(1, 30.0, 3001).unwrap();
        let exp = ScalarField::from_fn(g, |p| 0.5 * (-p[0].abs()).exp());
        let f = decay_fit(&exp).unwrap();
        assert!((f.c1 - 0.5).abs() < 1e-9 && (f.c2 - 1.0).abs() < 1e-9 && f.envelope_holds);
        let gauss = ScalarField::from_fn(g, |p| (-0.01 * p[0] * p[0]).exp());
        let f = decay_fit(&gauss).unwrap();
        assert!(f.c2 > 0.0);
        assert!(f.c1_required.is_finite());
    }

    #[test]
    fn ball_mass_and_quantiles() {
        let g = Grid::new(1, 8.0, 1601).unwrap();
        let var: f64 = 0.25;
        let m = ScalarField::from_fn(g, |p| (-p[0] * p[0] / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt());
        let origin = [0.0; MAX_DIM];
        assert_eq!(radius_for_mass(&m, &origin, 0.0), Some(0.0));
        let r = radius_for_mass(&m, &origin, 0.9).unwrap();
        // Two-sided 90% quantile of N(0, 1) is 1.6448536.
        assert!((r - 1.6448536 * var.sqrt()).abs() < 1e-3, "{r}");
        assert!((ball_mass(&m, &origin, 100.0) - m.integrate()).abs() < 1e-14);
        let mut last = 0.0;
        for k in 0..20 {
            let b = ball_mass(&m, &origin, 0.1 * k as f64);
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn decoupled_control_sweep() {
        let template = model(0.5, 0.0, 0.2, PotentialSpec::Power { coef: 0.5, b: 2.0 });
        let settings = SweepSettings { half_width: 4.0, h_max: 0.01, window: 2000.0, ..Default::default() };
        let eps = [0.2, 0.1, 0.05];
        let entries = run_sweep(&template, &eps, &settings, &SolverConfig::default());
        let rm = RescaledModel::new(&template);
        for e in &entries {
            let r = e.record().unwrap();
            assert!((r.lambda - r.epsilon).abs() < 1e-3);
            assert!((r.lambda_tilde - r.epsilon.powf(rm.e_lam + 1.0)).abs() < 1e-3 * r.epsilon.powf(rm.e_lam));
            // Gaussian of variance ε in rescaled units ε^{1/2}/ε^{e_len}.
            let expect = 1.6448536 * r.epsilon.sqrt() / r.epsilon.powf(rm.e_len);
            let got = radius_for_mass(&e.profile().unwrap().m_bar, &[0.0; MAX_DIM], 0.9).unwrap();
            assert!((got - expect).abs() < 1e-2 * expect.max(1.0), "{got} {expect}");
        }
        let rep = concentration_report(&entries, &template, template.mass);
        assert!(rep.radii.iter().all(|(_, r)| *r == Some(0.0)));
    }

    #[test]
    fn coupled_sweep_is_bounded_and_concentrates() {
        let template = model(1.0, 1.0, 0.2, PotentialSpec::Power { coef: 1.0, b: 2.0 });
        let eps = [0.2, 0.1, 0.05];
        let entries = run_sweep(&template, &eps, &SweepSettings::default(), &SolverConfig::default());
        let recs: Vec<&SweepRecord> = entries.iter().map(|e| e.record().unwrap()).collect();
        assert!(recs.iter().all(|r| r.lambda_tilde < 0.0));
        let (slope, _) = fit_exponent(&eps, &recs.iter().map(|r| -r.lambda).collect::<Vec<_>>()).unwrap();
        assert!((slope + 2.0).abs() < 0.3, "{slope}");
        let sup: Vec<f64> = recs.iter().map(|r| r.sup_m_bar).collect();
        let (lo, hi) = sup.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi / lo <= 3.0);
        let rep = concentration_report(&entries, &template, 0.1);
        assert!(rep.stabilizes && rep.distance_nonincreasing, "{rep:?}");
        for w in recs.windows(2) {
            for (a, b) in w[0].mass_fraction.iter().zip(&w[1].mass_fraction) {
                assert!(b.1 <= template.mass + 1e-9 && a.1 <= template.mass + 1e-9);
            }
        }
        let d = recs.last().unwrap().decay.as_ref().unwrap();
        assert!(d.c2 > 0.0);
    }

    #[test]
    fn symmetric_minima_are_undetermined() {
        let pot = PotentialSpec::PolynomialProduct { coef: 1.0, minima: vec![vec![-1.0], vec![1.0]], exponents: vec![2.0, 2.0] };
        let template = model(1.0, 1.0, 0.4, pot);
        let settings = SweepSettings { half_width: 2.5, h_max: 0.02, align: 10, ..Default::default() };
        let rep = flattest_min_experiment(&template, &[0.4], &settings, &SolverConfig::default(), 1e-8).unwrap();
        assert!(rep.undetermined && rep.expected.is_none() && !rep.converges_to_expected);
        assert!(flattest_min_experiment(
            &template.with_potential(PotentialSpec::Power { coef: 1.0, b: 2.0 }),
            &[0.4],
            &settings,
            &SolverConfig::default(),
            1e-8
        )
        .is_err());
    }

    #[test]
    fn recentering_moves_argmin_to_middle() {
        let g = Grid::new(1, 1.0, 11).unwrap();
        let f = ScalarField::from_fn(g, |p| (p[0] - 0.4).abs());
        let r = recenter(&f, f.argmin());
        assert_eq!(r.argmin(), 5);
        assert_eq!(r.values()[10], 0.0);
    }

    #[test]
    fn nls_matches_harmonic_oscillator() {
        let m = model(0.5, 0.0, 0.25, PotentialSpec::Power { coef: 0.5, b: 2.0 });
        let g = Grid::new(1, 8.0, 801).unwrap();
        let cfg = SolverConfig::default();
        let s = solve_mfg(&m, &g, &cfg).unwrap();
        let rep = hopf_cole_crosscheck(&s, &m, &cfg, &NlsOptions::default()).unwrap();
        assert!((rep.lambda_nls - 0.25).abs() < 1e-3 && rep.lambda_gap_relative < 1e-2, "{rep:?}");
        assert!(rep.density_gap_relative < 1e-3, "{rep:?}");
        assert!(rep.hopf_cole_spread < 1e-2);
        let wrong = model(1.0, 0.0, 0.25, PotentialSpec::Power { coef: 0.5, b: 2.0 });
        assert!(hopf_cole_crosscheck(&s, &wrong, &cfg, &NlsOptions::default()).is_err());
    }

    #[test]
    fn restrict_keeps_spacing_and_values() {
        let g = Grid::new(1, 4.0, 81).unwrap();
        let f = ScalarField::from_fn(g, |p| p[0] * p[0]);
        let r = restrict(&f, 2.0).unwrap();
        assert_eq!(r.grid().node_count(), 41);
        assert!((r.grid().spacing() - g.spacing()).abs() < 1e-15);
        for i in 0..41 {
            let x = r.grid().coord(i);
            assert!((r.values()[i] - x * x).abs() < 1e-12);
        }
        assert!(restrict(&f, 5.0).is_err());
    }
}
