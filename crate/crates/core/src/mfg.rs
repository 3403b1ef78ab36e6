//! Coupled stationary system solved by fictitious play (damped, with Anderson
//! mixing) between the
//! HJB and Fokker–Planck solvers, with the optimality certificates of a
//! converged triple.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{energy, kinetic_energy, EnergyBreakdown, KPair};
use crate::error::{Error, Result};
use crate::fokker_planck::{drift_from_value, face_density, solve_stationary_fp, FpProblem};
use crate::grid::{gradient, GradientScheme, Grid, Location, Point, ScalarField, VectorField};
use crate::hjb::{solve_ergodic_hjb, HjbOptions, HjbProblem};
use crate::linalg::least_squares;
use crate::model::{local_coupling, mollified_coupling, ModelParams, Mollifier, RescaledModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Initial damping `θ ∈ (0, 1]`; halved whenever the update grows.
    pub damping: f64,
    pub max_outer: usize,
    /// Anderson mixing depth on the density update; 0 gives plain damped iteration.
    pub anderson_depth: usize,
    /// Stop when `‖m̂ − m‖_{L¹} < fp_tol · M`.
    pub fp_tol: f64,
    /// Accept a run whose update has stopped shrinking for `stall_window`
    /// iterations once it is below `fp_floor · M`. The HJB residual cannot go
    /// under its roundoff floor, which caps how small the update can get on
    /// fine grids. Ten windows without progress above the floor is a failure.
    pub fp_floor: f64,
    pub stall_window: usize,
    pub hjb: HjbOptions,
    pub mollified: bool,
    /// Mollifier radius; `None` means two grid spacings.
    pub mollifier_width: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_outer: 3000,
            anderson_depth: 5,
            fp_tol: 1e-12,
            fp_floor: 1e-6,
            stall_window: 40,
            hjb: HjbOptions::default(),
            mollified: true,
            mollifier_width: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.fp_tol > 0.0 && self.hjb.tol > 0.0 && self.fp_floor >= 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if let Some(w) = self.mollifier_width {
            if !(w > 0.0) {
                return Err(Error::InvalidParameter(format!("mollifier width must be positive, got {w}")));
            }
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidParameter("max_outer must be at least 1".into()));
        }
        Ok(())
    }

    pub fn mollifier(&self, grid: &Grid) -> Result<Option<Mollifier>> {
        if !self.mollified {
            return Ok(None);
        }
        Mollifier::new(grid, self.mollifier_width.unwrap_or(2.0 * grid.spacing())).map(Some)
    }
}

/// Starting point of the fixed-point iteration.
#[derive(Debug, Clone)]
pub enum Initial {
    /// Normalized Gaussian; `width = None` picks a width from the concentration scale.
    Gaussian {
        center: Point,
        width: Option<f64>,
    },
    Density(ScalarField),
    Warm {
        m: ScalarField,
        u: ScalarField,
        lambda: f64,
    },
}

impl Default for Initial {
    fn default() -> Self {
        Initial::Gaussian { center: [0.0; crate::grid::MAX_DIM], width: None }
    }
}

#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub u: ScalarField,
    pub m: ScalarField,
    pub w: VectorField,
    pub lambda: f64,
    pub energy: EnergyBreakdown,
    pub duality_gap: f64,
    pub optimality_residual: f64,
    pub fixedpoint_iterations: usize,
    pub converged: bool,
    /// Accepted on the stagnation rule rather than `fp_tol`.
    pub stalled: bool,
    /// `‖m̂ − m‖_{L¹}` per outer iteration.
    pub history: Vec<f64>,
    pub hjb_residual: f64,
    pub cell_peclet: f64,
    pub argmin: usize,
}

impl MfgSolution {
    pub fn grid(&self) -> &Grid {
        self.m.grid()
    }

    pub fn pair(&self, epsilon: f64, mass: f64) -> Result<KPair> {
        KPair::new(self.m.clone(), self.w.clone(), epsilon, mass)
    }

    pub fn argmin_point(&self) -> Point {
        self.grid().point(self.argmin)
    }
}

fn gaussian(grid: &Grid, center: &Point, width: f64, mass: f64) -> ScalarField {
    let f = ScalarField::from_fn(*grid, |p| {
        let d2: f64 = (0..grid.dim()).map(|k| (p[k] - center[k]).powi(2)).sum();
        (-0.5 * d2 / (width * width)).exp()
    });
    let total = f.integrate();
    f.map(|v| v * mass / total)
}

fn default_width(model: &ModelParams, grid: &Grid) -> f64 {
    let scale = 2.0 * RescaledModel::new(model).length_scale();
    scale.max(3.0 * grid.spacing()).min(0.25 * grid.half_width())
}

/// `f_k[m] + V` or `f(m) + V`.
pub fn coupling_rhs(model: &ModelParams, mollifier: Option<&Mollifier>, m: &ScalarField, v: &ScalarField) -> Result<ScalarField> {
    let f = match mollifier {
        Some(k) => mollified_coupling(&model.coupling, k, m)?,
        None => local_coupling(&model.coupling, m),
    };
    f.zip_map(v, |a, b| a + b)
}

pub fn solve_mfg(model: &ModelParams, grid: &Grid, config: &SolverConfig) -> Result<MfgSolution> {
    solve_mfg_from(model, grid, config, &Initial::default())
}

pub fn solve_mfg_from(model: &ModelParams, grid: &Grid, config: &SolverConfig, init: &Initial) -> Result<MfgSolution> {
    model.validate()?;
    config.validate()?;
    if model.dim != grid.dim() {
        return Err(Error::Shape(format!("model dimension {} on a {}-d grid", model.dim, grid.dim())));
    }
    let mass = model.mass;
    let mollifier = config.mollifier(grid)?;
    let v = model.potential.field(grid);
    let (mut m, mut warm) = match init {
        Initial::Gaussian { center, width } => (gaussian(grid, center, width.unwrap_or_else(|| default_width(model, grid)), mass), None),
        Initial::Density(m0) => {
            grid.check_same(m0.grid())?;
            let t = m0.integrate();
            if !(t > 0.0) || m0.min() < 0.0 {
                return Err(Error::Domain("initial density must be non-negative with positive mass".into()));
            }
            (m0.map(|x| x * mass / t), None)
        }
        Initial::Warm { m: m0, u, lambda } => {
            grid.check_same(m0.grid())?;
            let t = m0.integrate();
            (m0.map(|x| (x * mass / t).max(0.0)), Some((u.clone(), *lambda)))
        }
    };

    let mut theta = config.damping;
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut mixer = Anderson::new(config.anderson_depth);
    let mut best = (f64::INFINITY, 0usize);
    loop {
        iterations += 1;
        let rhs = coupling_rhs(model, mollifier.as_ref(), &m, &v)?;
        let problem = HjbProblem { rhs, epsilon: model.epsilon, hamiltonian: model.hamiltonian };
        let hjb = solve_ergodic_hjb(&problem, &config.hjb, warm.as_ref().map(|(u, l)| (u, *l)))?;
        let drift = drift_from_value(&hjb.u, &model.hamiltonian);
        let fp = solve_stationary_fp(&FpProblem { drift, epsilon: model.epsilon, mass }, Some(hjb.argmin))?;
        let r = fp.m.l1_distance(&m)?;
        history.push(r);
        if r < 0.9 * best.0 {
            best = (r, iterations);
        }
        let stalled = iterations - best.1 >= config.stall_window.max(1) && best.0 < config.fp_floor * mass;
        if model.coupling.is_zero() || r < config.fp_tol * mass || stalled {
            return finish(model, config, mollifier.as_ref(), hjb, fp.m, fp.w, history, iterations, stalled);
        }
        let hopeless = iterations - best.1 >= 10 * config.stall_window.max(1);
        if iterations >= config.max_outer || hopeless || !r.is_finite() {
            return Err(Error::NoConvergence { solver: "fictitious play", iterations, residual: r, history });
        }
        if r > prev {
            theta = (0.5 * theta).max(1.0 / 1024.0);
            mixer.reset();
        } else {
            theta = (1.05 * theta).min(config.damping);
        }
        prev = r;
        let f: Vec<f64> = fp.m.values().iter().zip(m.values()).map(|(a, b)| a - b).collect();
        let mut next = mixer.step(m.values(), &f, theta);
        next.iter_mut().for_each(|x| *x = x.max(0.0));
        let candidate = ScalarField::new(*grid, next)?;
        let t = candidate.integrate();
        m = if t > 0.0 { candidate.map(|x| x * mass / t) } else { m.zip_map(&fp.m, |a, b| (1.0 - theta) * a + theta * b)? };
        warm = Some((hjb.u, hjb.lambda));
    }
}

/// Type-II Anderson mixing for `x ↦ x + F(x)`.
struct Anderson {
    depth: usize,
    last: Option<(Vec<f64>, Vec<f64>)>,
    dx: VecDeque<Vec<f64>>,
    df: VecDeque<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self { depth, last: None, dx: VecDeque::new(), df: VecDeque::new() }
    }

    fn reset(&mut self) {
        self.dx.clear();
        self.df.clear();
        self.last = None;
    }

    fn step(&mut self, x: &[f64], f: &[f64], beta: f64) -> Vec<f64> {
        if self.depth == 0 {
            return x.iter().zip(f).map(|(a, b)| a + beta * b).collect();
        }
        if let Some((lx, lf)) = self.last.take() {
            self.dx.push_back(x.iter().zip(&lx).map(|(a, b)| a - b).collect());
            self.df.push_back(f.iter().zip(&lf).map(|(a, b)| a - b).collect());
            if self.dx.len() > self.depth {
                self.dx.pop_front();
                self.df.pop_front();
            }
        }
        self.last = Some((x.to_vec(), f.to_vec()));
        let cols: Vec<Vec<f64>> = self.df.iter().cloned().collect();
        let gamma = least_squares(&cols, f);
        let mut out: Vec<f64> = x.iter().zip(f).map(|(a, b)| a + beta * b).collect();
        for ((g, dx), df) in gamma.iter().zip(&self.dx).zip(&self.df) {
            for ((o, a), b) in out.iter_mut().zip(dx).zip(df) {
                *o -= g * (a + beta * b);
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &ModelParams,
    config: &SolverConfig,
    mollifier: Option<&Mollifier>,
    hjb: crate::hjb::HjbSolution,
    m: ScalarField,
    w: VectorField,
    history: Vec<f64>,
    iterations: usize,
    stalled: bool,
) -> Result<MfgSolution> {
    let pair = KPair::new(m, w, model.epsilon, model.mass)?;
    let energy = energy(&pair, model, mollifier)?;
    let optimality_residual = optimality_residual(&hjb.u, &pair.m, &pair.w, model);
    let mut sol = MfgSolution {
        u: hjb.u,
        m: pair.m,
        w: pair.w,
        lambda: hjb.lambda,
        energy,
        duality_gap: 0.0,
        optimality_residual,
        fixedpoint_iterations: iterations,
        converged: true,
        stalled,
        history,
        hjb_residual: hjb.residual,
        cell_peclet: hjb.cell_peclet,
        argmin: hjb.argmin,
    };
    sol.duality_gap = duality_certificate(&sol, model, config)?;
    Ok(sol)
}

/// `|λM − (∫ m L(−w/m) + ∫(V + f_k[m]) m)|`.
pub fn duality_certificate(sol: &MfgSolution, model: &ModelParams, config: &SolverConfig) -> Result<f64> {
    let pair = sol.pair(model.epsilon, model.mass)?;
    let mollifier = config.mollifier(sol.grid())?;
    let v = model.potential.field(sol.grid());
    let rhs = coupling_rhs(model, mollifier.as_ref(), &pair.m, &v)?;
    let j = kinetic_energy(&pair, &model.hamiltonian) + rhs.zip_map(&pair.m, |a, b| a * b)?.integrate();
    Ok((sol.lambda * model.mass - j).abs())
}

/// `Σ_faces |face| · |w + ∇H(∇u) m_face|`, the discrete `∫ m |w/m + ∇H(∇u)|`.
pub fn optimality_residual(u: &ScalarField, m: &ScalarField, w: &VectorField, model: &ModelParams) -> f64 {
    let g = *m.grid();
    let drift = drift_from_value(u, &model.hamiltonian);
    let md = face_density(m, &drift, model.epsilon);
    let mut total = 0.0;
    for k in 0..g.dim() {
        for i in 0..g.node_count() {
            if g.has_face(k, i) {
                total += g.face_weight(k, i) * (w.component(k)[i] + drift.component(k)[i] * md.component(k)[i]).abs();
            }
        }
    }
    total
}

/// Solves from several starting points in parallel.
pub fn multi_start(model: &ModelParams, grid: &Grid, config: &SolverConfig, inits: &[Initial]) -> Vec<Result<MfgSolution>> {
    inits.par_iter().map(|i| solve_mfg_from(model, grid, config, i)).collect()
}

/// Groups converged solutions whose energies agree within `tol`; one
/// representative index per group, lowest energy first.
pub fn distinct_equilibria(solutions: &[MfgSolution], tol: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..solutions.len()).collect();
    order.sort_by(|&a, &b| solutions[a].energy.total.total_cmp(&solutions[b].energy.total));
    let mut reps: Vec<usize> = Vec::new();
    for i in order {
        if reps.iter().all(|&r| (solutions[r].energy.total - solutions[i].energy.total).abs() > tol) {
            reps.push(i);
        }
    }
    reps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizerReport {
    pub trials: usize,
    pub passed: usize,
    pub solution_energy: f64,
    pub lowest_competitor: f64,
    pub tolerance: f64,
    /// `(trial, competitor energy)` of each violation.
    pub failures: Vec<(usize, f64)>,
}

impl MinimizerReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty() && self.passed == self.trials
    }
}

/// Random feasible competitor: a smooth positive density with `w = ε∇m`,
/// plus a density-weighted discrete curl in two dimensions.
pub fn random_competitor(sol: &MfgSolution, model: &ModelParams, rng: &mut impl Rng) -> Result<KPair> {
    let g = *sol.grid();
    let l = g.half_width();
    let m = if rng.random_bool(0.5) {
        let modes: Vec<(usize, usize, f64, f64)> = (0..4)
            .map(|_| (rng.random_range(1..4), rng.random_range(0..3), rng.random_range(-0.6..0.6), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let scale = RescaledModel::new(model).length_scale().max(4.0 * g.spacing());
        let bump = ScalarField::from_fn(g, |p| {
            let mut s = 0.0;
            for &(kx, ky, a, ph) in &modes {
                let mut t = a * (kx as f64 * p[0] / (4.0 * scale) + ph).sin();
                if g.dim() > 1 {
                    t *= (ky as f64 * p[1] / (4.0 * scale) + ph).cos();
                }
                s += t;
            }
            s.exp()
        });
        sol.m.zip_map(&bump, |a, b| a * b)?
    } else {
        let k = rng.random_range(1..4);
        let comps: Vec<(Point, f64, f64)> = (0..k)
            .map(|_| {
                let mut c = sol.argmin_point();
                for ck in c.iter_mut().take(g.dim()) {
                    *ck += rng.random_range(-0.3..0.3) * l;
                }
                (c, rng.random_range(0.05..0.3) * l, rng.random_range(0.2..1.0))
            })
            .collect();
        ScalarField::from_fn(g, |p| {
            comps
                .iter()
                .map(|(c, s, a)| {
                    let d2: f64 = (0..g.dim()).map(|k| (p[k] - c[k]).powi(2)).sum();
                    a * (-0.5 * d2 / (s * s)).exp()
                })
                .sum()
        })
    };
    let total = m.integrate();
    let m = m.map(|v| v * model.mass / total);
    let mut w = gradient(&m, GradientScheme::Central)?.scaled(model.epsilon);
    if g.dim() == 2 {
        let amp = rng.random_range(-1.0..1.0) * model.epsilon;
        let kx = rng.random_range(1..3) as f64;
        w = w.add(&density_weighted_curl(&m, amp, kx))?;
    }
    KPair::new(m, w, model.epsilon, model.mass)
}

/// Curl of `ψ = amp · m_cell · sin(kx·x)` on cell centres, with `ψ = 0` on
/// cells touching the boundary: a discrete divergence-free face field.
fn density_weighted_curl(m: &ScalarField, amp: f64, kx: f64) -> VectorField {
    let g = *m.grid();
    let n = g.points_per_axis();
    let h = g.spacing();
    let mv = m.values();
    let psi = |i: isize, j: isize| -> f64 {
        if i < 1 || j < 1 || i as usize >= n - 2 || j as usize >= n - 2 {
            return 0.0;
        }
        let (i, j) = (i as usize, j as usize);
        let c = 0.25 * (mv[i + n * j] + mv[i + 1 + n * j] + mv[i + n * (j + 1)] + mv[i + 1 + n * (j + 1)]);
        let x = 0.5 * (g.coord(i) + g.coord(i + 1));
        amp * c * (kx * x).sin()
    };
    let mut comps = vec![vec![0.0; g.node_count()]; 2];
    for j in 0..n {
        for i in 0..n {
            let f = i + n * j;
            let (ii, jj) = (i as isize, j as isize);
            if i + 1 < n {
                comps[0][f] = (psi(ii, jj) - psi(ii, jj - 1)) / h;
            }
            if j + 1 < n {
                comps[1][f] = -(psi(ii, jj) - psi(ii - 1, jj)) / h;
            }
        }
    }
    VectorField::from_components(g, Location::Faces, comps).expect("curl vanishes on missing faces")
}

/// Checks `E(sol) ≤ E(competitor) + tol` over `trials` random competitors.
pub fn minimizer_verification(sol: &MfgSolution, model: &ModelParams, config: &SolverConfig, trials: usize, seed: u64) -> Result<MinimizerReport> {
    let mollifier = config.mollifier(sol.grid())?;
    let base = sol.energy.total;
    let tolerance = (10.0 * sol.duality_gap).max(1e-8 * (1.0 + base.abs()));
    let energies: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let pair = random_competitor(sol, model, &mut rng)?;
            Ok(energy(&pair, model, mollifier.as_ref())?.total)
        })
        .collect();
    let mut failures = Vec::new();
    let mut lowest = f64::INFINITY;
    for (t, e) in energies.into_iter().enumerate() {
        let e = e?;
        lowest = lowest.min(e);
        if e < base - tolerance {
            failures.push((t, e));
        }
    }
    Ok(MinimizerReport { trials, passed: trials - failures.len(), solution_energy: base, lowest_competitor: lowest, tolerance, failures })
}
