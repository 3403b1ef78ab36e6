//! Stationary Kolmogorov equation `−εΔm − div(m b) = 0`, `∫m = M`, solved as
//! the null vector of a Scharfetter–Gummel finite-volume operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient, GradientScheme, Grid, Location, ScalarField, VectorField};
use crate::linalg::BandMatrix;
use crate::model::HamiltonianSpec;

#[derive(Debug, Clone)]
pub struct FpProblem {
    /// Face-located drift `b = ∇H(∇u)`.
    pub drift: VectorField,
    pub epsilon: f64,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct FpSolution {
    pub m: ScalarField,
    pub w: VectorField,
    /// `max |A m| / max (|A| m)` after normalization.
    pub linear_residual: f64,
}

/// Bernoulli function `x / (eˣ − 1)`.
#[inline]
pub fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 - 0.5 * x + x * x / 12.0
    } else {
        x / x.exp_m1()
    }
}

/// Weight of the lower node in the exponentially fitted face density.
#[inline]
pub fn sg_weight(peclet: f64) -> f64 {
    if peclet.abs() < 1e-3 {
        0.5 - peclet / 12.0 + peclet.powi(3) / 720.0
    } else {
        (1.0 - bernoulli(peclet)) / peclet
    }
}

/// Face drift `∇H(∇u)` from the central (face) gradient of `u`.
pub fn drift_from_value(u: &ScalarField, hamiltonian: &HamiltonianSpec) -> VectorField {
    let p = gradient(u, GradientScheme::Central).expect("central gradient has no shape constraints");
    drift_from_gradient(&p, hamiltonian)
}

pub fn drift_from_gradient(p: &VectorField, hamiltonian: &HamiltonianSpec) -> VectorField {
    let g = *p.grid();
    let mut comps = vec![vec![0.0; g.node_count()]; g.dim()];
    for (k, comp) in comps.iter_mut().enumerate() {
        for (i, c) in comp.iter_mut().enumerate() {
            if g.has_face(k, i) {
                let s = if g.dim() == 1 { p.component(0)[i].powi(2) } else { p.face_norm_sq(k, i) };
                *c = hamiltonian.drift_factor(s) * p.component(k)[i];
            }
        }
    }
    VectorField::from_raw(g, Location::Faces, comps)
}

/// Exponentially fitted face densities `θ m_i + (1−θ) m_{i+1}`.
pub fn face_density(m: &ScalarField, drift: &VectorField, epsilon: f64) -> VectorField {
    let g = *m.grid();
    let h = g.spacing();
    let mv = m.values();
    let comps = (0..g.dim())
        .map(|k| {
            let s = g.stride(k);
            let b = drift.component(k);
            (0..g.node_count())
                .map(|i| {
                    if g.has_face(k, i) {
                        let th = sg_weight(b[i] * h / epsilon);
                        th * mv[i] + (1.0 - th) * mv[i + s]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    VectorField::from_raw(g, Location::Faces, comps)
}

/// `w = −b · m_face`.
pub fn flux_field(m: &ScalarField, drift: &VectorField, epsilon: f64) -> VectorField {
    let md = face_density(m, drift, epsilon);
    let g = *m.grid();
    let comps = (0..g.dim()).map(|k| md.component(k).iter().zip(drift.component(k)).map(|(a, b)| -a * b).collect()).collect();
    VectorField::from_raw(g, Location::Faces, comps)
}

/// Node-weighted operator `ω · div(ε∇m + b m_face)`; its columns sum to zero.
pub fn assemble(drift: &VectorField, epsilon: f64) -> BandMatrix {
    let g = *drift.grid();
    let h = g.spacing();
    let n = g.node_count();
    let bw = g.stride(g.dim() - 1);
    let mut a = BandMatrix::zeros(n, bw, bw);
    for k in 0..g.dim() {
        let s = g.stride(k);
        let b = drift.component(k);
        for i in 0..n {
            if !g.has_face(k, i) {
                continue;
            }
            let c = g.face_weight(k, i) * epsilon / (h * h);
            let p = b[i] * h / epsilon;
            let (up, down) = (c * bernoulli(-p), c * bernoulli(p));
            a.add(i, i + s, up);
            a.add(i, i, -down);
            a.add(i + s, i + s, -up);
            a.add(i + s, i, down);
        }
    }
    a
}

fn pinned_solve(a: &BandMatrix, r: usize) -> Result<Vec<f64>> {
    let mut t = a.clone();
    t.clear_row(r);
    t.set(r, r, 1.0);
    let lu = t.factor()?;
    let mut x = vec![0.0; a.size()];
    x[r] = 1.0;
    lu.solve_in_place(&mut x);
    Ok(x)
}

/// Solves the stationary equation; `pin_hint` should point at a node of large
/// density (the minimum of the value function is a good choice).
pub fn solve_stationary_fp(problem: &FpProblem, pin_hint: Option<usize>) -> Result<FpSolution> {
    let g = *problem.drift.grid();
    if problem.drift.location() != Location::Faces {
        return Err(Error::Shape("drift must be face-located".into()));
    }
    if !(problem.epsilon > 0.0 && problem.mass > 0.0) {
        return Err(Error::InvalidParameter(format!("need epsilon > 0 and mass > 0, got {} and {}", problem.epsilon, problem.mass)));
    }
    if problem.drift.components().iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("drift is not finite".into()));
    }
    let a = assemble(&problem.drift, problem.epsilon);
    let r = pin_hint.unwrap_or(g.node_count() / 2).min(g.node_count() - 1);
    let mut x = pinned_solve(&a, r)?;
    let big = x.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if !big.is_finite() || big > 1e50 {
        let mut r2 = 0;
        for (i, v) in x.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            if *v > x[r2] || x[r2].is_nan() {
                r2 = i;
            }
        }
        x = pinned_solve(&a, r2)?;
    }
    let peak = x.iter().fold(0.0f64, |s, v| s.max(*v));
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::Singular("null vector has no positive entries".into()));
    }
    for v in x.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 * peak {
                return Err(Error::Scheme(format!("negative density {v} relative to peak {peak}")));
            }
            *v = 0.0;
        }
    }
    let m = ScalarField::from_raw(g, x);
    let total = m.integrate();
    let m = m.map(|v| v * problem.mass / total);

    let mut am = vec![0.0; g.node_count()];
    a.matvec(m.values(), &mut am);
    let mut scale = 0.0f64;
    for i in 0..g.node_count() {
        let row: f64 = a.row_range(i).map(|j| a.get(i, j).abs() * m.values()[j]).sum();
        scale = scale.max(row);
    }
    let linear_residual = am.iter().fold(0.0f64, |s, v| s.max(v.abs())) / scale.max(f64::MIN_POSITIVE);
    let w = flux_field(&m, &problem.drift, problem.epsilon);
    Ok(FpSolution { m, w, linear_residual })
}

/// Weighted-moment diagnostics of a density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub kappa: f64,
    /// `∫ e^{κu} m`.
    pub weighted_integral: f64,
    /// `(R, ∫_{|x|>R} e^{κ|x|} m)`.
    pub tails: Vec<(f64, f64)>,
    pub finite: bool,
    pub tails_decreasing: bool,
}

pub fn lyapunov_mass_decay(m: &ScalarField, u: &ScalarField, kappa: f64, radii: &[f64]) -> Result<LyapunovReport> {
    m.grid().check_same(u.grid())?;
    let g: &Grid = m.grid();
    let weighted_integral = m.zip_map(u, |mi, ui| mi * (kappa * ui).exp())?.integrate();
    let tails: Vec<(f64, f64)> = radii
        .iter()
        .map(|&r| {
            let t = (0..g.node_count())
                .filter_map(|i| {
                    let p = g.point(i);
                    let d = (p[0] * p[0] + p[1] * p[1]).sqrt();
                    (d > r).then(|| g.node_weight(i) * (kappa * d).exp() * m.values()[i])
                })
                .sum();
            (r, t)
        })
        .collect();
    let finite = weighted_integral.is_finite() && tails.iter().all(|t| t.1.is_finite());
    let tails_decreasing = tails.windows(2).all(|w| w[1].0 < w[0].0 || w[1].1 <= w[0].1);
    Ok(LyapunovReport { kappa, weighted_integral, tails, finite, tails_decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{divergence, laplacian};

    fn solve(u: &ScalarField, h: HamiltonianSpec, eps: f64, mass: f64) -> FpSolution {
        let drift = drift_from_value(u, &h);
        solve_stationary_fp(&FpProblem { drift, epsilon: eps, mass }, Some(u.argmin())).unwrap()
    }

    #[test]
    fn bernoulli_and_weights() {
        assert_eq!(bernoulli(0.0), 1.0);
        for x in [1e-7, 1e-4, 0.3, 5.0, -2.0, 800.0, -800.0] {
            assert!((bernoulli(-x) - bernoulli(x) - x).abs() < 1e-12 * (1.0 + x.abs()));
        }
        for p in [-20.0, -1e-2, -1e-4, 0.0, 1e-4, 2e-3, 0.7, 30.0] {
            let t = sg_weight(p);
            assert!((0.0..=1.0).contains(&t));
            if p != 0.0 {
                let exact = (1.0 - bernoulli(p)) / p;
                assert!((t - exact).abs() < 1e-11, "{p}");
            }
        }
    }

    #[test]
    fn zero_drift_gives_uniform_density() {
        let g = Grid::new(1, 1.0, 41).unwrap();
        let sol = solve(&ScalarField::zeros(g), HamiltonianSpec::new(0.5, 2.0).unwrap(), 0.3, 1.0);
        assert!(sol.m.values().iter().all(|v| (v - 0.5).abs() < 1e-13));
    }

    #[test]
    fn quadratic_value_gives_gaussian() {
        let eps = 0.25;
        let g = Grid::with_max_spacing(1, 8.0, 0.02, 2).unwrap();
        let u = ScalarField::from_fn(g, |p| 0.5 * p[0] * p[0]);
        let sol = solve(&u, HamiltonianSpec::new(0.5, 2.0).unwrap(), eps, 1.0);
        let c = 1.0 / (2.0 * std::f64::consts::PI * eps).sqrt();
        let err = (0..g.node_count()).map(|i| (sol.m.values()[i] - c * (-0.5 * g.coord(i).powi(2) / eps).exp()).abs()).fold(0.0f64, f64::max);
        assert!(err / c < 1e-3, "{}", err / c);
        assert!((sol.m.integrate() - 1.0).abs() < 1e-12);
        let sol2 = solve(&u, HamiltonianSpec::new(0.5, 2.0).unwrap(), eps, 2.0);
        for (a, b) in sol.m.values().iter().zip(sol2.m.values()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1e-300) * 4.0);
        }
    }

    #[test]
    fn gibbs_density_is_exact_for_gradient_drift_in_2d() {
        let g = Grid::new(2, 2.0, 31).unwrap();
        let eps = 0.4;
        let pot = ScalarField::from_fn(g, |p| 0.5 * p[0] * p[0] + 0.25 * p[1].powi(4) + 0.3 * p[0] * p[1]);
        let sol = solve(&pot, HamiltonianSpec::new(0.5, 2.0).unwrap(), eps, 1.0);
        let gibbs = pot.map(|v| (-v / eps).exp());
        let z = gibbs.integrate();
        for (a, b) in sol.m.values().iter().zip(gibbs.values()) {
            assert!((a - b / z).abs() < 1e-10 * (b / z).max(1e-3));
        }
        assert!(sol.m.values().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn constraint_residual_vanishes_and_mass_is_conserved() {
        let g = Grid::new(1, 3.0, 301).unwrap();
        let u = ScalarField::from_fn(g, |p| (p[0] - 0.3).powi(2) + 0.2 * (3.0 * p[0]).sin());
        let eps = 0.1;
        let sol = solve(&u, HamiltonianSpec::new(1.0, 2.0).unwrap(), eps, 1.0);
        assert!(sol.linear_residual < 1e-12, "{}", sol.linear_residual);
        let res = laplacian(&sol.m).map(|v| -eps * v).zip_map(&divergence(&sol.w), |a, b| a + b).unwrap();
        let scale = eps * sol.m.max() / (g.spacing() * g.spacing());
        assert!(res.max_abs() < 1e-12 * scale, "{}", res.max_abs() / scale);

        let a = assemble(&drift_from_value(&u, &HamiltonianSpec::new(1.0, 2.0).unwrap()), eps);
        let x: Vec<f64> = (0..g.node_count()).map(|i| 1.0 + (i as f64).sin()).collect();
        let mut ax = vec![0.0; x.len()];
        a.matvec(&x, &mut ax);
        let total: f64 = ax.iter().sum();
        let mag: f64 = ax.iter().map(|v| v.abs()).sum();
        assert!(total.abs() < 1e-13 * mag);
    }

    #[test]
    fn strongly_advected_density_stays_positive() {
        let g = Grid::new(1, 4.0, 201).unwrap();
        let u = ScalarField::from_fn(g, |p| 3.0 * (p[0] - 2.0).powi(2));
        let sol = solve(&u, HamiltonianSpec::new(1.5, 2.0).unwrap(), 0.01, 1.0);
        assert!(sol.m.values().iter().all(|v| *v >= 0.0));
        assert!((sol.m.integrate() - 1.0).abs() < 1e-12);
        let peak = sol.m.argmax();
        assert!((g.coord(peak) - 2.0).abs() < 0.05);
    }

    #[test]
    fn general_gamma_drift() {
        let g = Grid::new(1, 2.0, 101).unwrap();
        let u = ScalarField::from_fn(g, |p| p[0].abs().powf(2.5));
        let h = HamiltonianSpec::new(1.0, 1.5).unwrap();
        let d = drift_from_value(&u, &h);
        let p = gradient(&u, GradientScheme::Central).unwrap();
        for i in 0..100 {
            let pi = p.component(0)[i];
            assert!((d.component(0)[i] - h.grad(&[pi])[0]).abs() < 1e-12);
        }
        let sol = solve(&u, h, 0.2, 1.0);
        assert!(sol.linear_residual < 1e-12);
    }

    #[test]
    fn lyapunov_report() {
        let eps = 0.25;
        let g = Grid::new(1, 8.0, 801).unwrap();
        let u = ScalarField::from_fn(g, |p| 0.5 * p[0] * p[0]);
        let sol = solve(&u, HamiltonianSpec::new(0.5, 2.0).unwrap(), eps, 1.0);
        let r0 = lyapunov_mass_decay(&sol.m, &u, 0.0, &[]).unwrap();
        assert!((r0.weighted_integral - 1.0).abs() < 1e-12);
        let r = lyapunov_mass_decay(&sol.m, &u, 0.5, &[0.5, 1.0, 2.0, 4.0]).unwrap();
        // ∫ e^{κx²/2} N(0, ε) = (1 − κε)^{−1/2}
        let exact = 1.0 / (1.0 - 0.5 * eps).sqrt();
        assert!((r.weighted_integral - exact).abs() < 1e-3);
        assert!(r.finite && r.tails_decreasing);
        let flat = ScalarField::constant(g, 1.0 / 16.0);
        let r = lyapunov_mass_decay(&flat, &u, 0.1, &[]).unwrap();
        let avg = u.map(|v| (0.1 * v).exp()).integrate() / 16.0;
        assert!((r.weighted_integral - avg).abs() < 1e-12 * avg);
    }
}
