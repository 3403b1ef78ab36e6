//! The energy `∫ m L(−w/m) + V m + F(m)` on pairs `(m, w)` satisfying
//! `−εΔm + div w = 0`, `∫m = M`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{divergence, laplacian, Grid, Location, ScalarField, VectorField};
use crate::mfg::{solve_mfg, SolverConfig};
use crate::model::{mollified_potential_energy, HamiltonianSpec, ModelParams, Mollifier, RescaledModel};

/// Relative level below which a density value counts as zero.
pub const DENSITY_FLOOR: f64 = 1e-14;
/// Relative flux level accepted on top of a zero density.
pub const FLUX_FLOOR: f64 = 1e-10;
/// Relative tolerance of the feasibility checks.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct KPair {
    pub m: ScalarField,
    /// Face-located flux.
    pub w: VectorField,
    pub epsilon: f64,
    pub mass: f64,
}

impl KPair {
    /// Clamps `m` at zero after rejecting entries below `−1e−12`.
    pub fn new(m: ScalarField, w: VectorField, epsilon: f64, mass: f64) -> Result<Self> {
        m.grid().check_same(w.grid())?;
        if w.location() != Location::Faces {
            return Err(Error::Shape("flux must be face-located".into()));
        }
        if let Some(v) = m.values().iter().find(|v| **v < -1e-12) {
            return Err(Error::Domain(format!("density has negative entry {v}")));
        }
        if !(epsilon > 0.0 && mass > 0.0) {
            return Err(Error::InvalidParameter(format!("need epsilon, mass > 0, got {epsilon}, {mass}")));
        }
        let m = m.map(|v| v.max(0.0));
        Ok(Self { m, w, epsilon, mass })
    }

    pub fn grid(&self) -> &Grid {
        self.m.grid()
    }

    /// Competitor with `w = ε∇m`, feasible for any density.
    pub fn gradient_pair(m: ScalarField, epsilon: f64) -> Result<Self> {
        let mass = m.integrate();
        let w = crate::grid::gradient(&m, crate::grid::GradientScheme::Central)?.scaled(epsilon);
        Self::new(m, w, epsilon, mass)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.m.map(|v| c * v), self.w.scaled(c), self.epsilon, c * self.mass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResidual {
    pub max: f64,
    pub l2: f64,
    /// `ε max|Δm| + max|div w|`, the size of the two cancelling terms.
    pub scale: f64,
}

impl ConstraintResidual {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.max
        } else {
            self.max / self.scale
        }
    }
}

/// Strong-form residual `−εΔm + div w`.
pub fn constraint_residual(pair: &KPair) -> ConstraintResidual {
    let lap = laplacian(&pair.m);
    let div = divergence(&pair.w);
    let r = lap.zip_map(&div, |l, d| -pair.epsilon * l + d).expect("same grid");
    ConstraintResidual { max: r.max_abs(), l2: r.l2_norm(), scale: pair.epsilon * lap.max_abs() + div.max_abs() }
}

/// `m L(−w/m)` with `0` for `m = 0, w = 0` and `+∞` for `m = 0, w ≠ 0`.
pub fn kinetic_density(hamiltonian: &HamiltonianSpec, m: f64, w: &[f64]) -> f64 {
    let r = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if m <= 0.0 {
        return if r == 0.0 { 0.0 } else { f64::INFINITY };
    }
    m * hamiltonian.lagrangian_norm(r / m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub kinetic: f64,
    pub potential: f64,
    pub coupling: f64,
    pub total: f64,
}

fn thresholded(hamiltonian: &HamiltonianSpec, m: f64, r: f64, m_floor: f64, w_floor: f64) -> f64 {
    if m <= m_floor {
        if r <= w_floor {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        m * hamiltonian.lagrangian_norm(r / m)
    }
}

/// `Σ_faces |face| · m_face L(−w/m_face)` with arithmetic face densities.
pub fn kinetic_energy(pair: &KPair, hamiltonian: &HamiltonianSpec) -> f64 {
    let g = *pair.grid();
    let mv = pair.m.values();
    let m_floor = DENSITY_FLOOR * pair.m.max();
    let w_floor = FLUX_FLOOR * pair.w.max_abs();
    let separable = g.dim() == 1 || hamiltonian.gamma == 2.0;
    let mut total = 0.0;
    for k in 0..g.dim() {
        let s = g.stride(k);
        let wk = pair.w.component(k);
        for i in 0..g.node_count() {
            if !g.has_face(k, i) {
                continue;
            }
            let ma = 0.5 * (mv[i] + mv[i + s]);
            let (r, share) = if separable { (wk[i].abs(), 1.0) } else { (pair.w.face_norm_sq(k, i).sqrt(), 1.0 / g.dim() as f64) };
            total += share * g.face_weight(k, i) * thresholded(hamiltonian, ma, r, m_floor, w_floor);
        }
    }
    total
}

/// `∫ m |w/m|^γ'`, the moment controlled by the a priori estimate.
pub fn kinetic_moment(pair: &KPair, hamiltonian: &HamiltonianSpec) -> f64 {
    let unit = HamiltonianSpec { c_h: 1.0, ..*hamiltonian };
    kinetic_energy(pair, &unit) / unit.c_l()
}

/// Rejects pairs violating the mass or the continuity constraint.
pub fn check_feasible(pair: &KPair) -> Result<ConstraintResidual> {
    let mass = pair.m.integrate();
    if (mass - pair.mass).abs() > FEASIBILITY_TOL * pair.mass {
        return Err(Error::Infeasible(format!("mass {mass} differs from {}", pair.mass)));
    }
    let c = constraint_residual(pair);
    if c.max > FEASIBILITY_TOL * c.scale {
        return Err(Error::Infeasible(format!("continuity residual {:.3e} against term size {:.3e}", c.max, c.scale)));
    }
    Ok(c)
}

/// Evaluates the three energy terms; `mollifier` selects `∫F(χ⋆m)` over `∫F(m)`.
pub fn energy(pair: &KPair, model: &ModelParams, mollifier: Option<&Mollifier>) -> Result<EnergyBreakdown> {
    check_feasible(pair)?;
    let kinetic = kinetic_energy(pair, &model.hamiltonian);
    let v = model.potential.field(pair.grid());
    let potential = v.zip_map(&pair.m, |a, b| a * b)?.integrate();
    let coupling = match mollifier {
        Some(k) => mollified_potential_energy(&model.coupling, k, &pair.m)?,
        None => pair.m.map(|x| model.coupling.big_f(x)).integrate(),
    };
    Ok(EnergyBreakdown { kinetic, potential, coupling, total: kinetic + potential + coupling })
}

/// Lower bound `−B X* δ/(1+δ)` from interpolating `∫m^{α+1}` between the
/// mass and the kinetic term; `c_s` is the interpolation constant.
pub fn energy_lower_bound(model: &ModelParams, c_s: f64) -> f64 {
    let gp = model.hamiltonian.gamma_prime();
    let alpha = model.coupling.alpha;
    let n = model.dim as f64;
    let delta = (gp / n - alpha) / alpha;
    let a = model.hamiltonian.c_l() * model.epsilon.powf(gp) * model.mass.powf(1.0 - (1.0 + delta) * (alpha + 1.0)) / c_s;
    let b = model.coupling.c_f / (alpha + 1.0);
    if b == 0.0 {
        return 0.0;
    }
    let x_star = (b / (a * (1.0 + delta))).powf(1.0 / delta);
    -b * x_star * delta / (1.0 + delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubadditivityReport {
    pub a: f64,
    pub energy_a: f64,
    pub energy_rest: f64,
    pub energy_full: f64,
    /// `ẽ(a) + ẽ(M−a) − ẽ(M)`.
    pub gap: f64,
}

/// Measures the subadditivity gap of the rescaled minimal energy by three
/// independent solves on `grid` (in rescaled coordinates).
pub fn subadditivity_gap(model: &ModelParams, grid: &Grid, config: &SolverConfig, a: f64) -> Result<SubadditivityReport> {
    let total = model.mass;
    if !(a > 0.0 && a < total) {
        return Err(Error::InvalidParameter(format!("need 0 < a < M = {total}, got {a}")));
    }
    let scaled = RescaledModel::new(model).params();
    let solve = |mass: f64| solve_mfg(&scaled.with_mass(mass), grid, config).map(|s| s.energy.total);
    let (ea, (er, ef)) = rayon::join(|| solve(a), || rayon::join(|| solve(total - a), || solve(total)));
    let (ea, er, ef) = (ea?, er?, ef?);
    Ok(SubadditivityReport { a, energy_a: ea, energy_rest: er, energy_full: ef, gap: ea + er - ef })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{gradient, GradientScheme};
    use crate::model::{CouplingSpec, PotentialSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ham(c_h: f64) -> HamiltonianSpec {
        HamiltonianSpec::new(c_h, 2.0).unwrap()
    }

    fn exp_model(eps: f64) -> ModelParams {
        ModelParams::new(1, ham(1.0), CouplingSpec::new(1.0, 1.0).unwrap(), PotentialSpec::Power { coef: 1.0, b: 1.0 }, 1.0, eps).unwrap()
    }

    #[test]
    fn kinetic_density_cases() {
        let h = ham(1.0);
        assert_eq!(kinetic_density(&h, 0.0, &[0.0]), 0.0);
        assert_eq!(kinetic_density(&h, 0.0, &[1e-3]), f64::INFINITY);
        assert_eq!(kinetic_density(&h, 2.0, &[0.0]), 0.0);
        assert!((kinetic_density(&h, 1.0, &[2.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_pairs_are_feasible() {
        let g = Grid::new(2, 3.0, 31).unwrap();
        let m = ScalarField::from_fn(g, |p| (-(p[0] - 0.3).powi(2) - 2.0 * p[1] * p[1]).exp() + 0.1);
        let pair = KPair::gradient_pair(m, 0.7).unwrap();
        let c = constraint_residual(&pair);
        assert!(c.max <= 1e-10 * c.scale, "{c:?}");
        let uniform = KPair::new(ScalarField::constant(g, 1.0), VectorField::zeros(g, Location::Faces), 0.7, 36.0).unwrap();
        assert_eq!(constraint_residual(&uniform).max, 0.0);
        let model = ModelParams::new(2, ham(1.0), CouplingSpec::new(1.0, 0.5).unwrap(), PotentialSpec::Power { coef: 1.0, b: 2.0 }, 36.0, 0.7).unwrap();
        assert_eq!(energy(&uniform, &model, None).unwrap().kinetic, 0.0);
    }

    #[test]
    fn exponential_density_energy() {
        let g = Grid::new(1, 30.0, 6001).unwrap();
        for eps in [1.0, 0.5] {
            let m = ScalarField::from_fn(g, |p| 0.5 * (-p[0].abs()).exp());
            let pair = KPair::gradient_pair(m, eps).unwrap();
            let pair = KPair { mass: pair.m.integrate(), ..pair };
            let e = energy(&pair, &exp_model(eps), None).unwrap();
            assert!((e.kinetic - eps * eps / 4.0).abs() < 1e-3, "{e:?}");
            assert!((e.potential - 1.0).abs() < 1e-3);
            assert!((e.coupling + 0.125).abs() < 1e-3);
            assert!((e.total - (eps * eps / 4.0 + 0.875)).abs() < 2e-3);
            assert!(e.total >= energy_lower_bound(&exp_model(eps), 1.0));
        }
    }

    #[test]
    fn infeasible_pairs_are_reported() {
        let g = Grid::new(1, 2.0, 41).unwrap();
        let m = ScalarField::from_fn(g, |p| 1.0 + 0.1 * p[0]);
        let mass = m.integrate();
        let bad_w = VectorField::from_fn(g, Location::Faces, |_, _| 0.3);
        let pair = KPair::new(m.clone(), bad_w, 0.5, mass).unwrap();
        assert!(matches!(energy(&pair, &exp_model(0.5), None), Err(Error::Infeasible(_))));
        let pair = KPair::gradient_pair(m, 0.5).unwrap();
        let wrong_mass = KPair { mass: pair.mass * 1.01, ..pair };
        assert!(matches!(check_feasible(&wrong_mass), Err(Error::Infeasible(_))));
    }

    #[test]
    fn zero_density_with_flux_is_infinite() {
        let g = Grid::new(1, 1.0, 5).unwrap();
        let m = ScalarField::new(g, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let w = VectorField::from_components(g, Location::Faces, vec![vec![0.5, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        let pair = KPair::new(m, w, 1.0, 0.5).unwrap();
        assert_eq!(kinetic_energy(&pair, &ham(1.0)), f64::INFINITY);
    }

    #[test]
    fn mollified_energy_converges() {
        let g = Grid::new(1, 6.0, 1201).unwrap();
        let m = ScalarField::from_fn(g, |p| (-p[0] * p[0]).exp());
        let pair = KPair::gradient_pair(m, 0.5).unwrap();
        let model = exp_model(0.5).with_mass(pair.mass);
        let plain = energy(&pair, &model, None).unwrap().total;
        let errs: Vec<f64> =
            [0.4, 0.2, 0.1].iter().map(|w| (energy(&pair, &model, Some(&Mollifier::new(&g, *w).unwrap())).unwrap().total - plain).abs()).collect();
        assert!(errs[0] / errs[1] > 2.0 && errs[1] / errs[2] > 2.0, "{errs:?}");
    }

    #[test]
    fn lower_bound_exponent() {
        let m = ModelParams::new(1, ham(1.0), CouplingSpec::new(1.0, 1.0).unwrap(), PotentialSpec::Power { coef: 1.0, b: 2.0 }, 1.0, 1.0).unwrap();
        let rm = RescaledModel::new(&m);
        let b0 = energy_lower_bound(&m, 1.0);
        let b1 = energy_lower_bound(&m.with_epsilon(0.5), 1.0);
        let b2 = energy_lower_bound(&m.with_epsilon(0.25), 1.0);
        let factor = 2f64.powf(rm.e_lam);
        assert!((b1 / b0 - factor).abs() < 1e-12 * factor && (b2 / b1 - factor).abs() < 1e-12 * factor);
        assert!(b0 < 0.0 && b0.is_finite());
        let g = Grid::new(1, 8.0, 801).unwrap();
        let gauss = ScalarField::from_fn(g, |p| (-p[0] * p[0]).exp());
        let gauss = gauss.map(|v| v / gauss.integrate());
        let pair = KPair::gradient_pair(gauss, 1.0).unwrap();
        assert!(energy(&pair, &m, None).unwrap().total >= b0);
    }

    #[test]
    fn scaling_identities() {
        let g = Grid::new(1, 5.0, 201).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = ModelParams::new(
            1,
            HamiltonianSpec::new(0.7, 1.6).unwrap(),
            CouplingSpec::new(1.3, 0.8).unwrap(),
            PotentialSpec::Power { coef: 1.0, b: 2.0 },
            1.0,
            0.4,
        )
        .unwrap();
        for _ in 0..10 {
            let (a, b, c) = (rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0), rng.random_range(1.1..4.0));
            let m = ScalarField::from_fn(g, |p| a * (-(p[0] - b).powi(2)).exp());
            let pair = KPair::gradient_pair(m, model.epsilon).unwrap();
            let big = pair.scaled(c).unwrap();
            let e1 = energy(&pair, &model.with_mass(pair.mass), None).unwrap();
            let e2 = energy(&big, &model.with_mass(big.mass), None).unwrap();
            assert!((e2.kinetic / e1.kinetic - c).abs() < 1e-12 * c);
            let expect = c.powf(model.coupling.alpha + 1.0);
            assert!((e2.coupling / e1.coupling - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn fp_output_is_feasible() {
        let g = Grid::new(1, 4.0, 201).unwrap();
        let u = ScalarField::from_fn(g, |p| 0.5 * p[0] * p[0] + 0.2 * p[0].sin());
        let drift = crate::fokker_planck::drift_from_value(&u, &ham(0.5));
        let fp = crate::fokker_planck::solve_stationary_fp(&crate::fokker_planck::FpProblem { drift, epsilon: 0.3, mass: 1.0 }, None).unwrap();
        let pair = KPair::new(fp.m, fp.w, 0.3, 1.0).unwrap();
        let c = check_feasible(&pair).unwrap();
        assert!(c.max <= 1e-11 * c.scale, "{c:?}");
        let _ = gradient(&pair.m, GradientScheme::Central).unwrap();
    }

    proptest! {
        #[test]
        fn kinetic_density_is_jointly_convex(
            m1 in 0.0f64..5.0, m2 in 0.0f64..5.0,
            w1 in -3.0f64..3.0, w2 in -3.0f64..3.0, v1 in -3.0f64..3.0, v2 in -3.0f64..3.0,
            gamma in 1.3f64..4.0,
        ) {
            let h = HamiltonianSpec::new(1.0, gamma).unwrap();
            let (m1, m2) = (m1 + 1e-3, m2 + 1e-3);
            let mid = kinetic_density(&h, 0.5 * (m1 + m2), &[0.5 * (w1 + w2), 0.5 * (v1 + v2)]);
            let avg = 0.5 * (kinetic_density(&h, m1, &[w1, v1]) + kinetic_density(&h, m2, &[w2, v2]));
            prop_assert!(mid <= avg * (1.0 + 1e-12) + 1e-12);
        }
    }
}
