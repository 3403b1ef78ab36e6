//! Model ingredients: power-law Hamiltonian and its Legendre transform,
//! local aggregating coupling, mollification, confining potentials and the
//! ε-rescaling that blows the concentrated solutions up to unit scale.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, ScalarField};

/// `H(p) = c_h |p|^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HamiltonianSpec {
    pub c_h: f64,
    pub gamma: f64,
}

impl Default for HamiltonianSpec {
    fn default() -> Self {
        Self { c_h: 1.0, gamma: 2.0 }
    }
}

impl HamiltonianSpec {
    pub fn new(c_h: f64, gamma: f64) -> Result<Self> {
        let s = Self { c_h, gamma };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_h.is_finite() && self.c_h > 0.0) {
            return Err(invalid(format!("c_h must be positive, got {}", self.c_h)));
        }
        if !(self.gamma.is_finite() && self.gamma > 1.0) {
            return Err(invalid(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Conjugate exponent `γ' = γ/(γ−1)`.
    pub fn gamma_prime(&self) -> f64 {
        self.gamma / (self.gamma - 1.0)
    }

    /// Constant of the conjugate `L(q) = c_l |q|^γ'`.
    pub fn c_l(&self) -> f64 {
        (1.0 - 1.0 / self.gamma) * (self.gamma * self.c_h).powf(1.0 / (1.0 - self.gamma))
    }

    pub fn value(&self, p: &[f64]) -> f64 {
        self.value_sq(norm_sq(p))
    }

    /// `H` as a function of `|p|²`.
    #[inline]
    pub fn value_sq(&self, s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else if self.gamma == 2.0 {
            self.c_h * s
        } else {
            self.c_h * s.powf(0.5 * self.gamma)
        }
    }

    /// `dH/d(|p|²)`; zero at the origin (continuous extension for γ ≥ 2, convention below).
    #[inline]
    pub fn dvalue_sq(&self, s: f64) -> f64 {
        if self.gamma == 2.0 {
            self.c_h
        } else if s <= 0.0 {
            0.0
        } else {
            0.5 * self.gamma * self.c_h * s.powf(0.5 * self.gamma - 1.0)
        }
    }

    /// Scalar factor `c` with `∇H(p) = c·p`, i.e. `c_h γ |p|^{γ−2}`; zero at `p = 0`.
    #[inline]
    pub fn drift_factor(&self, s: f64) -> f64 {
        2.0 * self.dvalue_sq(s)
    }

    pub fn grad(&self, p: &[f64]) -> Vec<f64> {
        let c = self.drift_factor(norm_sq(p));
        p.iter().map(|x| c * x).collect()
    }

    pub fn lagrangian(&self, q: &[f64]) -> f64 {
        self.lagrangian_norm(norm_sq(q).sqrt())
    }

    pub fn lagrangian_norm(&self, r: f64) -> f64 {
        if r <= 0.0 {
            0.0
        } else if self.gamma == 2.0 {
            self.c_l() * r * r
        } else {
            self.c_l() * r.powf(self.gamma_prime())
        }
    }

    pub fn grad_lagrangian(&self, q: &[f64]) -> Vec<f64> {
        let r = norm_sq(q).sqrt();
        if r == 0.0 {
            return vec![0.0; q.len()];
        }
        let gp = self.gamma_prime();
        let c = self.c_l() * gp * r.powf(gp - 2.0);
        q.iter().map(|x| c * x).collect()
    }
}

fn norm_sq(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum()
}

/// Brute-force `sup_{t ≥ 0} (t·r − φ(t))` for a radial convex `φ`: a dense
/// scan of `[0, t_max]` followed by golden-section refinement.
pub fn radial_conjugate(phi: impl Fn(f64) -> f64, r: f64, t_max: f64) -> f64 {
    let samples = 4000;
    let g = |t: f64| t * r - phi(t);
    let mut best_t = 0.0;
    let mut best = g(0.0);
    for i in 1..=samples {
        let t = t_max * i as f64 / samples as f64;
        let v = g(t);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    let step = t_max / samples as f64;
    let (mut a, mut b) = ((best_t - step).max(0.0), (best_t + step).min(t_max));
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    for _ in 0..200 {
        if g(c) > g(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - ratio * (b - a);
        d = a + ratio * (b - a);
    }
    best.max(g(0.5 * (a + b)))
}

/// `f(m) = −c_f m^alpha`, `F(m) = ∫₀^m f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingSpec {
    pub c_f: f64,
    pub alpha: f64,
}

impl Default for CouplingSpec {
    fn default() -> Self {
        Self { c_f: 1.0, alpha: 1.0 }
    }
}

impl CouplingSpec {
    pub fn new(c_f: f64, alpha: f64) -> Result<Self> {
        let s = Self { c_f, alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_f.is_finite() && self.c_f >= 0.0) {
            return Err(invalid(format!("c_f must be non-negative, got {}", self.c_f)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.c_f == 0.0
    }

    #[inline]
    pub fn f(&self, m: f64) -> f64 {
        if m <= 0.0 || self.c_f == 0.0 {
            0.0
        } else if self.alpha == 1.0 {
            -self.c_f * m
        } else {
            -self.c_f * m.powf(self.alpha)
        }
    }

    #[inline]
    pub fn big_f(&self, m: f64) -> f64 {
        if m <= 0.0 || self.c_f == 0.0 {
            0.0
        } else {
            -self.c_f * m.powf(self.alpha + 1.0) / (self.alpha + 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `coef · |x|^b`; `coef = 0` gives the potential-free model.
    Power { coef: f64, b: f64 },
    /// `coef · Π_j |x − x_j|^{b_j}`.
    PolynomialProduct { coef: f64, minima: Vec<Vec<f64>>, exponents: Vec<f64> },
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec::Power { coef: 1.0, b: 2.0 }
    }
}

impl PotentialSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            PotentialSpec::Power { coef, b } => {
                if !(coef.is_finite() && *coef >= 0.0) {
                    return Err(invalid(format!("potential coefficient must be non-negative, got {coef}")));
                }
                if !(b.is_finite() && *b > 0.0) {
                    return Err(invalid(format!("potential exponent must be positive, got {b}")));
                }
            }
            PotentialSpec::PolynomialProduct { coef, minima, exponents } => {
                if !(coef.is_finite() && *coef > 0.0) {
                    return Err(invalid(format!("potential coefficient must be positive, got {coef}")));
                }
                if minima.is_empty() || minima.len() != exponents.len() {
                    return Err(invalid("potential needs one exponent per listed minimum"));
                }
                if let Some(x) = minima.iter().find(|x| x.len() != dim || x.iter().any(|c| !c.is_finite())) {
                    return Err(invalid(format!("minimum {x:?} does not have {dim} finite coordinates")));
                }
                if let Some(b) = exponents.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
                    return Err(invalid(format!("potential exponents must be positive, got {b}")));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            PotentialSpec::Power { coef, b } => {
                if *coef == 0.0 {
                    return 0.0;
                }
                let r2 = norm_sq(x);
                if *b == 2.0 {
                    coef * r2
                } else {
                    coef * r2.powf(0.5 * b)
                }
            }
            PotentialSpec::PolynomialProduct { coef, minima, exponents } => {
                let mut v = *coef;
                for (xj, bj) in minima.iter().zip(exponents) {
                    let d2: f64 = x.iter().zip(xj).map(|(a, c)| (a - c) * (a - c)).sum();
                    v *= d2.powf(0.5 * bj);
                }
                v
            }
        }
    }

    pub fn field(&self, grid: &Grid) -> ScalarField {
        let d = grid.dim();
        ScalarField::from_fn(*grid, |p| self.value(&p[..d]))
    }

    /// Total growth exponent `b`.
    pub fn growth(&self) -> f64 {
        match self {
            PotentialSpec::Power { coef, b } => {
                if *coef == 0.0 {
                    0.0
                } else {
                    *b
                }
            }
            PotentialSpec::PolynomialProduct { exponents, .. } => exponents.iter().sum(),
        }
    }

    pub fn minima(&self, dim: usize) -> Vec<Vec<f64>> {
        match self {
            PotentialSpec::Power { .. } => vec![vec![0.0; dim]],
            PotentialSpec::PolynomialProduct { minima, .. } => minima.clone(),
        }
    }

    /// Distance from `x` to the nearest listed zero of the potential.
    pub fn distance_to_minima(&self, x: &[f64]) -> f64 {
        self.minima(x.len()).iter().map(|m| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).fold(f64::INFINITY, f64::min)
    }

    /// Checks `C_V⁻¹ (max(|x|−C_V, 0))^b ≤ V(x) ≤ C_V (1+|x|)^b` on `samples`.
    pub fn growth_envelope_holds(&self, c_v: f64, samples: &[Vec<f64>]) -> bool {
        let b = self.growth();
        samples.iter().all(|x| {
            let r = norm_sq(x).sqrt();
            let v = self.value(x);
            let lo = (r - c_v).max(0.0).powf(b) / c_v;
            let hi = c_v * (1.0 + r).powf(b);
            v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12)
        })
    }

    /// `V_ε(y) = ε^{e_lam} V(ε^{e_len} y)` in closed form.
    pub fn rescaled(&self, epsilon: f64, e_len: f64, e_lam: f64) -> Self {
        let s = epsilon.powf(e_len);
        match self {
            PotentialSpec::Power { coef, b } => PotentialSpec::Power { coef: coef * epsilon.powf(e_lam) * s.powf(*b), b: *b },
            PotentialSpec::PolynomialProduct { coef, minima, exponents } => {
                let total: f64 = exponents.iter().sum();
                PotentialSpec::PolynomialProduct {
                    coef: coef * epsilon.powf(e_lam) * s.powf(total),
                    minima: minima.iter().map(|x| x.iter().map(|c| c / s).collect()).collect(),
                    exponents: exponents.clone(),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub dim: usize,
    pub hamiltonian: HamiltonianSpec,
    pub coupling: CouplingSpec,
    pub potential: PotentialSpec,
    pub mass: f64,
    pub epsilon: f64,
}

/// One dimension, `H = |p|²`, `f = −m`, `V = |x|²`, `M = 1`, `ε = 0.25`.
impl Default for ModelParams {
    fn default() -> Self {
        Self {
            dim: 1,
            hamiltonian: HamiltonianSpec::default(),
            coupling: CouplingSpec::default(),
            potential: PotentialSpec::default(),
            mass: 1.0,
            epsilon: 0.25,
        }
    }
}

impl ModelParams {
    pub fn new(dim: usize, hamiltonian: HamiltonianSpec, coupling: CouplingSpec, potential: PotentialSpec, mass: f64, epsilon: f64) -> Result<Self> {
        let m = Self { dim, hamiltonian, coupling, potential, mass, epsilon };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=crate::grid::MAX_DIM).contains(&self.dim) {
            return Err(invalid(format!("dimension must be 1 or 2, got {}", self.dim)));
        }
        self.hamiltonian.validate()?;
        self.coupling.validate()?;
        self.potential.validate(self.dim)?;
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(invalid(format!("mass must be positive, got {}", self.mass)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        let critical = self.critical_alpha();
        if self.coupling.alpha >= critical {
            return Err(invalid(format!("coupling exponent alpha = {} is not subcritical: need alpha < gamma'/N = {critical}", self.coupling.alpha)));
        }
        Ok(())
    }

    pub fn critical_alpha(&self) -> f64 {
        self.hamiltonian.gamma_prime() / self.dim as f64
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    pub fn with_mass(&self, mass: f64) -> Self {
        Self { mass, ..self.clone() }
    }

    pub fn with_potential(&self, potential: PotentialSpec) -> Self {
        Self { potential, ..self.clone() }
    }
}

/// Exponents of the ε-rescaling `y = x/ε^{e_len}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaledModel {
    pub base: ModelParams,
    pub e_len: f64,
    pub e_mass: f64,
    pub e_lam: f64,
    pub e_u: f64,
}

impl RescaledModel {
    pub fn new(base: &ModelParams) -> Self {
        let n = base.dim as f64;
        let gp = base.hamiltonian.gamma_prime();
        let a = base.coupling.alpha;
        let den = gp - a * n;
        let e_len = gp / den;
        let e_mass = n * e_len;
        let e_lam = a * e_mass;
        let e_u = (n * a * (gp - 1.0) - gp) / den;
        Self { base: base.clone(), e_len, e_mass, e_lam, e_u }
    }

    pub fn length_scale(&self) -> f64 {
        self.base.epsilon.powf(self.e_len)
    }

    /// `H_ε(p) = ε^{e_lam} H(ε^{−Nα(γ'−1)/(γ'−αN)} p)`.
    pub fn hamiltonian(&self, p: &[f64]) -> f64 {
        let b = &self.base;
        let gp = b.hamiltonian.gamma_prime();
        let k = b.dim as f64 * b.coupling.alpha * (gp - 1.0) / (gp - b.coupling.alpha * b.dim as f64);
        let s = b.epsilon.powf(-k);
        let q: Vec<f64> = p.iter().map(|x| s * x).collect();
        b.epsilon.powf(self.e_lam) * b.hamiltonian.value(&q)
    }

    /// `L_ε`, the conjugate of `H_ε`.
    pub fn lagrangian(&self, q: &[f64]) -> f64 {
        let b = &self.base;
        let gp = b.hamiltonian.gamma_prime();
        let k = b.dim as f64 * b.coupling.alpha * (gp - 1.0) / (gp - b.coupling.alpha * b.dim as f64);
        let s = b.epsilon.powf(k - self.e_lam);
        let q: Vec<f64> = q.iter().map(|x| s * x).collect();
        b.epsilon.powf(self.e_lam) * b.hamiltonian.lagrangian(&q)
    }

    /// `f_ε(m) = ε^{e_lam} f(ε^{−e_mass} m)`.
    pub fn coupling(&self, m: f64) -> f64 {
        let b = &self.base;
        b.epsilon.powf(self.e_lam) * b.coupling.f(b.epsilon.powf(-self.e_mass) * m)
    }

    pub fn potential_value(&self, y: &[f64]) -> f64 {
        let b = &self.base;
        let s = self.length_scale();
        let x: Vec<f64> = y.iter().map(|c| s * c).collect();
        b.epsilon.powf(self.e_lam) * b.potential.value(&x)
    }

    /// The rescaled problem as an ordinary model with unit viscosity. Exact for
    /// the power-law ingredients, which are invariant under the rescaling.
    pub fn params(&self) -> ModelParams {
        let b = &self.base;
        ModelParams { potential: b.potential.rescaled(b.epsilon, self.e_len, self.e_lam), epsilon: 1.0, ..b.clone() }
    }
}

/// Discrete symmetric bump mollifier with support radius `width`, applied
/// with per-node renormalized weights.
#[derive(Debug, Clone)]
pub struct Mollifier {
    grid: Grid,
    offsets: Vec<(isize, isize, f64)>,
}

impl Mollifier {
    pub fn new(grid: &Grid, width: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(invalid(format!("mollifier width must be positive, got {width}")));
        }
        let h = grid.spacing();
        let r = (width / h).floor() as isize;
        let mut offsets = Vec::new();
        let ry = if grid.dim() > 1 { r } else { 0 };
        for j in -ry..=ry {
            for i in -r..=r {
                let d = ((i * i + j * j) as f64).sqrt() * h / width;
                if d < 1.0 {
                    offsets.push((i, j, (-1.0 / (1.0 - d * d)).exp()));
                }
            }
        }
        Ok(Self { grid: *grid, offsets })
    }

    pub fn support_points(&self) -> usize {
        self.offsets.len()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let n = g.points_per_axis() as isize;
        let stride = g.points_per_axis() as isize;
        (0..g.node_count())
            .map(|i| {
                let idx = g.multi_index(i);
                let (x, y) = (idx[0] as isize, idx[1] as isize);
                let (mut acc, mut wsum) = (0.0, 0.0);
                for &(di, dj, w) in &self.offsets {
                    let (xi, yj) = (x + di, y + dj);
                    if xi < 0 || xi >= n || yj < 0 || (g.dim() > 1 && yj >= n) {
                        continue;
                    }
                    acc += w * f[(yj * stride + xi) as usize];
                    wsum += w;
                }
                acc / wsum
            })
            .collect()
    }
}

/// `f_k[m] = χ ⋆ f(χ ⋆ m)`.
pub fn mollified_coupling(coupling: &CouplingSpec, mollifier: &Mollifier, m: &ScalarField) -> Result<ScalarField> {
    check_density(m)?;
    let inner = mollifier.apply(m.values());
    let fv: Vec<f64> = inner.iter().map(|&v| coupling.f(v)).collect();
    Ok(ScalarField::from_raw(*m.grid(), mollifier.apply(&fv)))
}

/// `∫ F(χ ⋆ m)`.
pub fn mollified_potential_energy(coupling: &CouplingSpec, mollifier: &Mollifier, m: &ScalarField) -> Result<f64> {
    check_density(m)?;
    let inner = mollifier.apply(m.values());
    let g = m.grid();
    Ok(inner.iter().enumerate().map(|(i, &v)| g.node_weight(i) * coupling.big_f(v)).sum())
}

/// Plain local coupling `f(m)` as a field.
pub fn local_coupling(coupling: &CouplingSpec, m: &ScalarField) -> ScalarField {
    m.map(|v| coupling.f(v))
}

fn check_density(m: &ScalarField) -> Result<()> {
    if let Some(v) = m.values().iter().find(|v| **v < -1e-12) {
        return Err(Error::Domain(format!("density has negative entry {v}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad() -> HamiltonianSpec {
        HamiltonianSpec::new(1.0, 2.0).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        assert_eq!(quad().value(&[0.0]), 0.0);
        assert_eq!(quad().value(&[3.0, 4.0]), 25.0);
        assert!((HamiltonianSpec::new(2.0, 3.0).unwrap().value(&[1.0]) - 2.0).abs() < 1e-15);
        assert_eq!(quad().grad(&[1.5, -2.0]), vec![3.0, -4.0]);
        assert_eq!(HamiltonianSpec::new(1.0, 1.5).unwrap().grad(&[0.0]), vec![0.0]);
        assert!((HamiltonianSpec::new(1.0, 3.0).unwrap().grad(&[2.0])[0] - 12.0).abs() < 1e-12);
        assert!(HamiltonianSpec::new(1.0, 1.0).is_err());
        assert!(HamiltonianSpec::new(0.0, 2.0).is_err());
    }

    #[test]
    fn lagrangian_examples() {
        assert_eq!(quad().lagrangian(&[0.0, 0.0]), 0.0);
        assert!((quad().lagrangian(&[2.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((quad().c_l() - 0.25).abs() < 1e-15);
        assert!((HamiltonianSpec::new(0.5, 2.0).unwrap().c_l() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lagrangian_matches_brute_force_sup() {
        for (c_h, gamma) in [(1.0, 2.0), (0.5, 2.0), (2.0, 3.0), (0.7, 1.5), (1.3, 4.0)] {
            let h = HamiltonianSpec::new(c_h, gamma).unwrap();
            for r in [0.1, 0.8, 2.5] {
                let t_star = (r / (gamma * c_h)).powf(1.0 / (gamma - 1.0));
                let num = radial_conjugate(|t| h.value_sq(t * t), r, 4.0 * t_star + 1.0);
                let exact = h.lagrangian_norm(r);
                assert!((num - exact).abs() <= 1e-6 * exact, "{c_h} {gamma} {r}: {num} vs {exact}");
            }
        }
    }

    #[test]
    fn coupling_examples() {
        let c = CouplingSpec::new(1.0, 1.0).unwrap();
        assert_eq!(c.f(0.0), 0.0);
        assert_eq!(c.big_f(0.0), 0.0);
        assert_eq!(c.f(2.0), -2.0);
        assert_eq!(c.big_f(2.0), -2.0);
        assert_eq!(c.big_f(-1.0), 0.0);
        let c = CouplingSpec::new(1.7, 0.6).unwrap();
        let m = 2.3;
        let n = 20000;
        let h = 1.0 / n as f64;
        let g = |s: f64| c.f(m * s * s) * 2.0 * m * s;
        let simpson: f64 = (0..n)
            .map(|i| {
                let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
                h / 6.0 * (g(a) + 4.0 * g(0.5 * (a + b)) + g(b))
            })
            .sum();
        assert!((simpson - c.big_f(m)).abs() < 1e-8);
    }

    #[test]
    fn potential_examples() {
        let v = PotentialSpec::PolynomialProduct { coef: 1.0, minima: vec![vec![-1.0], vec![1.0]], exponents: vec![2.0, 4.0] };
        assert_eq!(v.value(&[-1.0]), 0.0);
        assert_eq!(v.value(&[1.0]), 0.0);
        assert!((v.value(&[0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(v.growth(), 6.0);
        let p = PotentialSpec::Power { coef: 1.0, b: 2.0 };
        assert_eq!(p.value(&[3.0, 4.0]), 25.0);
        let samples: Vec<Vec<f64>> = (0..50).map(|i| vec![-6.0 + 0.25 * i as f64]).collect();
        assert!(v.growth_envelope_holds(1.0, &samples));
        let weak = PotentialSpec::PolynomialProduct { coef: 0.01, minima: vec![vec![-1.0], vec![1.0]], exponents: vec![2.0, 4.0] };
        assert!(!weak.growth_envelope_holds(1.0, &samples));
        assert!(weak.growth_envelope_holds(100.0, &samples));
    }

    #[test]
    fn subcriticality_gate() {
        let h = quad();
        let v = PotentialSpec::Power { coef: 1.0, b: 2.0 };
        assert!(ModelParams::new(1, h, CouplingSpec::new(1.0, 1.999).unwrap(), v.clone(), 1.0, 0.1).is_ok());
        let err = ModelParams::new(1, h, CouplingSpec::new(1.0, 2.0).unwrap(), v.clone(), 1.0, 0.1).unwrap_err();
        assert!(err.to_string().contains("subcritical"));
        assert!(ModelParams::new(2, h, CouplingSpec::new(1.0, 1.0).unwrap(), PotentialSpec::Power { coef: 1.0, b: 2.0 }, 1.0, 0.1).is_err());
        assert!(ModelParams::new(1, h, CouplingSpec::new(1.0, 1.0).unwrap(), v, 1.0, -0.1).is_err());
    }

    fn reference() -> ModelParams {
        ModelParams::new(1, quad(), CouplingSpec::new(1.0, 1.0).unwrap(), PotentialSpec::Power { coef: 1.0, b: 2.0 }, 1.0, 0.5).unwrap()
    }

    #[test]
    fn rescaling_exponents() {
        let r = RescaledModel::new(&reference());
        assert_eq!((r.e_len, r.e_mass, r.e_lam, r.e_u), (2.0, 2.0, 2.0, -1.0));
        assert_eq!(r.e_mass, r.base.dim as f64 * r.e_len);
        assert_eq!(r.e_lam, r.base.coupling.alpha * r.e_mass);
        let m2 = ModelParams::new(
            2,
            HamiltonianSpec::new(1.0, 3.0).unwrap(),
            CouplingSpec::new(1.0, 0.5).unwrap(),
            PotentialSpec::Power { coef: 1.0, b: 2.0 },
            1.0,
            0.5,
        )
        .unwrap();
        let r2 = RescaledModel::new(&m2);
        assert!(r2.e_len > 0.0);
        assert_eq!(r2.e_lam, 0.5 * r2.e_mass);
    }

    #[test]
    fn rescaled_ingredients_are_scale_invariant_for_powers() {
        for eps in [0.5, 0.1, 0.03] {
            let r = RescaledModel::new(&reference().with_epsilon(eps));
            for p in [0.3, -1.7, 4.0] {
                assert!((r.hamiltonian(&[p]) - p * p).abs() < 1e-12 * (1.0 + p * p));
                assert!((r.lagrangian(&[p]) - 0.25 * p * p).abs() < 1e-12 * (1.0 + p * p));
                let m = p.abs();
                assert!((r.coupling(m) + m).abs() < 1e-12 * (1.0 + m));
            }
        }
        let r = RescaledModel::new(&reference());
        assert!((r.potential_value(&[1.0]) - 0.015625).abs() < 1e-15);
        let pp = r.params();
        assert_eq!(pp.epsilon, 1.0);
        for y in [0.0, 1.0, -3.5] {
            assert!((pp.potential.value(&[y]) - r.potential_value(&[y])).abs() < 1e-15);
        }
    }

    #[test]
    fn rescaled_potential_respects_rescaled_envelope() {
        let v = PotentialSpec::PolynomialProduct { coef: 1.0, minima: vec![vec![-1.0], vec![1.0]], exponents: vec![2.0, 4.0] };
        let c_v = 40.0;
        let base = ModelParams::new(1, quad(), CouplingSpec::new(1.0, 1.0).unwrap(), v.clone(), 1.0, 0.3).unwrap();
        let r = RescaledModel::new(&base);
        let s = r.length_scale();
        let scale = 0.3f64.powf(r.e_lam);
        let pp = r.params();
        for i in 0..200 {
            let y = -100.0 + i as f64;
            let val = pp.potential.value(&[y]);
            let lo = scale * ((s * y).abs() - c_v).max(0.0).powf(6.0) / c_v;
            let hi = scale * c_v * (1.0 + s * y.abs()).powf(6.0);
            assert!(val >= lo && val <= hi * (1.0 + 1e-12));
            assert!((val - r.potential_value(&[y])).abs() <= 1e-12 * (1.0 + val));
        }
    }

    #[test]
    fn mollifier_preserves_constants_and_converges() {
        let g = Grid::new(1, 4.0, 801).unwrap();
        let c = CouplingSpec::new(1.3, 1.0).unwrap();
        let mol = Mollifier::new(&g, 4.0 * g.spacing()).unwrap();
        let fk = mollified_coupling(&c, &mol, &ScalarField::constant(g, 0.7)).unwrap();
        assert!(fk.values().iter().all(|v| (v - c.f(0.7)).abs() < 1e-14));
        let m = ScalarField::from_fn(g, |p| (-p[0] * p[0]).exp());
        let exact = local_coupling(&c, &m);
        let err = |w: f64| {
            let mol = Mollifier::new(&g, w).unwrap();
            let fk = mollified_coupling(&c, &mol, &m).unwrap();
            fk.values().iter().zip(exact.values()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
        };
        let (e1, e2, e3) = (err(0.4), err(0.2), err(0.1));
        assert!(e2 < 0.5 * e1 && e3 < 0.5 * e2, "{e1} {e2} {e3}");
        assert!(mollified_coupling(&c, &mol, &ScalarField::constant(g, -1.0)).is_err());
    }

    #[test]
    fn mollified_energy_respects_jensen_bound() {
        let g = Grid::new(1, 5.0, 501).unwrap();
        let c = CouplingSpec::new(1.0, 1.0).unwrap();
        let m = ScalarField::from_fn(g, |p| (-(p[0] - 0.3).powi(2) * 3.0).exp() + 0.2 * (-(p[0] + 1.0).powi(2)).exp());
        let plain: f64 = m.map(|v| c.big_f(v)).integrate();
        for w in [0.05, 0.2, 0.5] {
            let mol = Mollifier::new(&g, w).unwrap();
            let fk = mollified_potential_energy(&c, &mol, &m).unwrap();
            assert!(fk >= plain - 1e-12 && fk <= 0.0);
        }
    }

    #[test]
    fn two_dimensional_mollifier_has_unit_mass() {
        let g = Grid::new(2, 1.0, 21).unwrap();
        let mol = Mollifier::new(&g, 0.25).unwrap();
        assert!(mol.support_points() > 9);
        let out = mol.apply(&vec![2.0; g.node_count()]);
        assert!(out.iter().all(|v| (v - 2.0).abs() < 1e-14));
    }

    proptest! {
        #[test]
        fn fenchel_young(p in -5.0f64..5.0, q in -5.0f64..5.0, p2 in -5.0f64..5.0, q2 in -5.0f64..5.0,
                         c_h in 0.2f64..3.0, gamma in 1.2f64..4.0) {
            let h = HamiltonianSpec::new(c_h, gamma).unwrap();
            let (pv, qv) = ([p, p2], [q, q2]);
            let lhs = p * q + p2 * q2;
            prop_assert!(lhs <= h.value(&pv) + h.lagrangian(&qv) + 1e-9 * (1.0 + lhs.abs()));
            let qs = h.grad(&pv);
            let eq = pv[0] * qs[0] + pv[1] * qs[1];
            let sum = h.value(&pv) + h.lagrangian(&qs);
            prop_assert!((eq - sum).abs() <= 1e-8 * (1.0 + eq.abs()));
            let back = h.grad_lagrangian(&qs);
            prop_assert!((back[0] - p).abs() <= 1e-7 * (1.0 + p.abs()));
        }

        #[test]
        fn grad_bound(p in -10.0f64..10.0, c_h in 0.2f64..3.0, gamma in 1.1f64..4.0) {
            let h = HamiltonianSpec::new(c_h, gamma).unwrap();
            let g = h.grad(&[p])[0].abs();
            prop_assert!(g <= c_h * gamma * p.abs().powf(gamma - 1.0) * (1.0 + 1e-12) + 1e-300);
        }
    }
}
