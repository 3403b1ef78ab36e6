//! Ergodic Hamilton–Jacobi–Bellman solver: find `(u, λ)` with
//! `−εΔu + H(∇u) + λ = rhs`, `min u = 0`.
//!
//! The node Hamiltonian is `H_i = c_h s_i^{γ/2}` where `s_i` approximates
//! `|∇u|²` from the face differences around node `i`. Newton's method on the
//! bordered system `(u, λ)` with pseudo-transient continuation as a fallback
//! solves the discrete equations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient, laplacian, GradientScheme, Grid, ScalarField};
use crate::linalg::{solve_rank_one_column, BandMatrix};
use crate::model::{HamiltonianSpec, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HjbScheme {
    /// `s_i = Σ_k mean(p²)` over the faces around `i`; second order.
    #[default]
    FaceAverage,
    /// `s_i = Σ_k max(p⁻,0)² + min(p⁺,0)²`; monotone, first order.
    Godunov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HjbMethod {
    /// Newton on the stationary system, switching to pseudo-transient
    /// continuation when the line search stalls.
    #[default]
    Newton,
    /// Linearized implicit time stepping with a fixed step until steady.
    TimeMarching,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbOptions {
    pub scheme: HjbScheme,
    pub method: HjbMethod,
    /// Convergence threshold on `max |R| / (1 + max |rhs|)`, raised to the
    /// rounding level of the discrete Laplacian on fine grids.
    pub tol: f64,
    pub max_iters: usize,
    /// Pseudo-time step for `TimeMarching` and the continuation fallback.
    pub dt: f64,
}

impl Default for HjbOptions {
    fn default() -> Self {
        Self { scheme: HjbScheme::FaceAverage, method: HjbMethod::Newton, tol: 1e-10, max_iters: 400, dt: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct HjbProblem {
    pub rhs: ScalarField,
    pub epsilon: f64,
    pub hamiltonian: HamiltonianSpec,
}

#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub u: ScalarField,
    pub lambda: f64,
    pub iterations: usize,
    /// Final `max |R|` (absolute).
    pub residual: f64,
    pub residual_history: Vec<f64>,
    /// First node in flat order attaining `min u = 0`.
    pub argmin: usize,
    pub argmin_x: Vec<f64>,
    /// `max |H'(p)| h / (2ε)` over faces; the scheme is monotone when this is ≤ 1.
    pub cell_peclet: f64,
}

/// Per-axis squared-gradient surrogate and its derivatives with respect to
/// `u[i − s]`, `u[i]`, `u[i + s]`.
#[inline]
fn axis_term(scheme: HjbScheme, down: Option<f64>, up: Option<f64>, h: f64) -> (f64, [f64; 3]) {
    match scheme {
        HjbScheme::FaceAverage => {
            let cnt = down.is_some() as u8 + up.is_some() as u8;
            let inv = if cnt == 0 { 0.0 } else { 1.0 / cnt as f64 };
            let (mut s, mut d) = (0.0, [0.0; 3]);
            if let Some(p) = down {
                s += p * p;
                d[0] -= 2.0 * p / h;
                d[1] += 2.0 * p / h;
            }
            if let Some(p) = up {
                s += p * p;
                d[1] -= 2.0 * p / h;
                d[2] += 2.0 * p / h;
            }
            (s * inv, [d[0] * inv, d[1] * inv, d[2] * inv])
        }
        HjbScheme::Godunov => {
            let (mut s, mut d) = (0.0, [0.0; 3]);
            if let Some(p) = down {
                let q = p.max(0.0);
                s += q * q;
                d[0] -= 2.0 * q / h;
                d[1] += 2.0 * q / h;
            }
            if let Some(p) = up {
                let q = p.min(0.0);
                s += q * q;
                d[1] -= 2.0 * q / h;
                d[2] += 2.0 * q / h;
            }
            (s, d)
        }
    }
}

struct Discretization<'a> {
    grid: Grid,
    problem: &'a HjbProblem,
    scheme: HjbScheme,
}

impl Discretization<'_> {
    fn face_diffs(&self, u: &[f64], i: usize, k: usize) -> (Option<f64>, Option<f64>) {
        let g = &self.grid;
        let s = g.stride(k);
        let ik = g.multi_index(i)[k];
        let h = g.spacing();
        let down = (ik > 0).then(|| (u[i] - u[i - s]) / h);
        let up = (ik + 1 < g.points_per_axis()).then(|| (u[i + s] - u[i]) / h);
        (down, up)
    }

    fn node_hamiltonian(&self, u: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        (0..g.node_count())
            .map(|i| {
                let s: f64 = (0..g.dim())
                    .map(|k| {
                        let (d, up) = self.face_diffs(u, i, k);
                        axis_term(self.scheme, d, up, g.spacing()).0
                    })
                    .sum();
                self.problem.hamiltonian.value_sq(s)
            })
            .collect()
    }

    fn residual(&self, u: &[f64], lambda: f64) -> Vec<f64> {
        let field = ScalarField::from_raw(self.grid, u.to_vec());
        let lap = laplacian(&field);
        let ham = self.node_hamiltonian(u);
        let eps = self.problem.epsilon;
        lap.values().iter().zip(&ham).zip(self.problem.rhs.values()).map(|((l, hv), r)| -eps * l + hv + lambda - r).collect()
    }

    fn jacobian(&self, u: &[f64]) -> BandMatrix {
        let g = &self.grid;
        let n = g.node_count();
        let bw = g.stride(g.dim() - 1);
        let h = g.spacing();
        let eps = self.problem.epsilon;
        let mut jac = BandMatrix::zeros(n, bw, bw);
        let mut parts = [[0.0; 3]; crate::grid::MAX_DIM];
        for i in 0..n {
            let idx = g.multi_index(i);
            let mut s = 0.0;
            for (k, part) in parts.iter_mut().enumerate().take(g.dim()) {
                let (d, up) = self.face_diffs(u, i, k);
                let (sk, dk) = axis_term(self.scheme, d, up, h);
                s += sk;
                *part = dk;
            }
            let dh = self.problem.hamiltonian.dvalue_sq(s);
            for (k, part) in parts.iter().enumerate().take(g.dim()) {
                let st = g.stride(k);
                let ik = idx[k];
                let w = if ik == 0 || ik + 1 == g.points_per_axis() { 0.5 * h } else { h };
                let c = eps / (h * w);
                if ik > 0 {
                    jac.add(i, i - st, dh * part[0] - c);
                    jac.add(i, i, c);
                }
                if ik + 1 < g.points_per_axis() {
                    jac.add(i, i + st, dh * part[2] - c);
                    jac.add(i, i, c);
                }
                jac.add(i, i, dh * part[1]);
            }
        }
        jac
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Residual field `−εΔu + H(∇u) + λ − rhs` of the discrete scheme.
pub fn hjb_residual(problem: &HjbProblem, scheme: HjbScheme, u: &ScalarField, lambda: f64) -> Result<ScalarField> {
    problem.rhs.grid().check_same(u.grid())?;
    let d = Discretization { grid: *u.grid(), problem, scheme };
    Ok(ScalarField::from_raw(*u.grid(), d.residual(u.values(), lambda)))
}

/// Solves the ergodic problem. `init` warm-starts `(u, λ)`.
pub fn solve_ergodic_hjb(problem: &HjbProblem, opts: &HjbOptions, init: Option<(&ScalarField, f64)>) -> Result<HjbSolution> {
    let g = *problem.rhs.grid();
    if !(problem.epsilon.is_finite() && problem.epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {}", problem.epsilon)));
    }
    if problem.rhs.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("right-hand side must be finite (bounded below)".into()));
    }
    if !(opts.tol > 0.0 && opts.dt > 0.0) {
        return Err(Error::InvalidParameter("hjb tolerance and time step must be positive".into()));
    }
    let n = g.node_count();
    let disc = Discretization { grid: g, problem, scheme: opts.scheme };
    let (mut u, mut lambda) = match init {
        Some((u0, l0)) => {
            g.check_same(u0.grid())?;
            (u0.values().to_vec(), l0)
        }
        None => (vec![0.0; n], problem.rhs.min()),
    };
    let r = match init {
        Some(_) => ScalarField::from_raw(g, u.clone()).argmin(),
        None => problem.rhs.argmin(),
    };
    let scale = 1.0 + problem.rhs.max_abs();
    let h = g.spacing();
    let floor = |u: &[f64]| 16.0 * g.dim() as f64 * problem.epsilon * f64::EPSILON * (1.0 + max_abs(u)) / (h * h);
    let mut target = (opts.tol * scale).max(floor(&u));

    let mut res_vec = disc.residual(&u, lambda);
    let mut res = max_abs(&res_vec);
    let mut history = vec![res];
    let newton = opts.method == HjbMethod::Newton;
    // Finite `dt` means a pseudo-transient step: taken in full, with the
    // step grown by the residual ratio until it is large enough for Newton.
    let mut dt = if newton { f64::INFINITY } else { opts.dt };
    let mut iterations = 0;

    while res > target {
        target = (opts.tol * scale).max(floor(&u));
        if res <= target {
            break;
        }
        if iterations >= opts.max_iters || !res.is_finite() {
            return Err(Error::NoConvergence { solver: "hjb", iterations, residual: res, history });
        }
        iterations += 1;
        let mut jac = disc.jacobian(&u);
        if dt.is_finite() {
            for i in 0..n {
                jac.add(i, i, 1.0 / dt);
            }
        }
        let col_r: Vec<f64> = (0..n).map(|i| if i.abs_diff(r) <= g.stride(g.dim() - 1) { jac.get(i, r) } else { 0.0 }).collect();
        let c = 1.0 + jac.get(r, r).abs();
        jac.add(r, r, c);
        let a: Vec<f64> = (0..n).map(|i| 1.0 - col_r[i] - if i == r { c } else { 0.0 }).collect();
        let rhs: Vec<f64> = res_vec.iter().map(|v| -v).collect();
        let x = match jac.factor().and_then(|lu| solve_rank_one_column(&lu, &a, r, &rhs)) {
            Ok(x) => x,
            Err(e) => {
                if newton {
                    dt = if dt.is_finite() { 0.1 * dt } else { opts.dt };
                    history.push(res);
                    continue;
                }
                return Err(e);
            }
        };
        let step = |t: f64| -> (Vec<f64>, f64) { ((0..n).map(|i| if i == r { u[i] } else { u[i] + t * x[i] }).collect(), lambda + t * x[r]) };

        if dt.is_finite() {
            let (tu, tl) = step(1.0);
            let tv = disc.residual(&tu, tl);
            let tr = max_abs(&tv);
            if !tr.is_finite() {
                dt *= 0.1;
                history.push(res);
                continue;
            }
            if newton {
                dt *= (res / tr).clamp(0.1, 10.0);
                if dt > 1e8 {
                    dt = f64::INFINITY;
                }
            }
            (u, lambda, res_vec, res) = (tu, tl, tv, tr);
            history.push(res);
            continue;
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let (tu, tl) = step(t);
            let tv = disc.residual(&tu, tl);
            let tr = max_abs(&tv);
            if tr.is_finite() && (tr <= (1.0 - 1e-4 * t) * res || (tr <= 2.0 * target && tr < res * 1.5)) {
                (u, lambda, res_vec, res) = (tu, tl, tv, tr);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        history.push(res);
        if !accepted {
            dt = opts.dt;
        }
    }

    let min = u.iter().copied().fold(f64::INFINITY, f64::min);
    u.iter_mut().for_each(|v| *v -= min);
    let u = ScalarField::from_raw(g, u);
    let argmin = u.argmin();
    let p = gradient(&u, GradientScheme::Central)?;
    let drift = crate::fokker_planck::drift_from_gradient(&p, &problem.hamiltonian);
    let cell_peclet = drift.max_abs() * g.spacing() / (2.0 * problem.epsilon);
    Ok(HjbSolution { argmin_x: g.point(argmin)[..g.dim()].to_vec(), u, lambda, iterations, residual: res, residual_history: history, argmin, cell_peclet })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientGrowthReport {
    /// Implied constant `K = max |∇u| / (1+|x|)^{b/γ}`.
    pub k: f64,
    pub exponent: f64,
    pub finite: bool,
}

pub fn gradient_growth_check(sol: &HjbSolution, model: &ModelParams) -> GradientGrowthReport {
    let g = *sol.u.grid();
    let exponent = model.potential.growth() / model.hamiltonian.gamma;
    let p = gradient(&sol.u, GradientScheme::Central).expect("same grid").to_nodes();
    let mut k = 0.0f64;
    for i in 0..g.node_count() {
        let x = g.point(i);
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let norm = (0..g.dim()).map(|a| p.component(a)[i].powi(2)).sum::<f64>().sqrt();
        k = k.max(norm / (1.0 + r).powf(exponent));
    }
    GradientGrowthReport { k, exponent, finite: k.is_finite() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthLowerReport {
    /// Largest `C` with `u ≥ C|x|^q − 1/C` on the outer half; `None` when skipped.
    pub c: Option<f64>,
    pub exponent: f64,
    pub skipped: bool,
}

pub fn growth_lower_check(sol: &HjbSolution, model: &ModelParams) -> GrowthLowerReport {
    let b = model.potential.growth();
    let q = 1.0 + b / model.hamiltonian.gamma;
    if b <= 0.0 {
        return GrowthLowerReport { c: None, exponent: q, skipped: true };
    }
    let g = *sol.u.grid();
    let outer: Vec<(f64, f64)> = (0..g.node_count())
        .filter_map(|i| {
            let x = g.point(i);
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            (r >= 0.5 * g.half_width()).then(|| (r.powf(q), sol.u.values()[i]))
        })
        .collect();
    let ok = |c: f64| outer.iter().all(|(rq, u)| *u >= c * rq - 1.0 / c);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while ok(hi) && hi < 1e12 {
        lo = hi;
        hi *= 2.0;
    }
    if lo == 0.0 {
        lo = 1e-12;
        if !ok(lo) {
            return GrowthLowerReport { c: Some(0.0), exponent: q, skipped: false };
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    GrowthLowerReport { c: Some(lo), exponent: q, skipped: false }
}
