//! Banded matrices and a partially pivoted banded LU factorization.

use crate::error::{Error, Result};

/// Square matrix with `kl` sub- and `ku` super-diagonals. Each row keeps
/// `kl` extra slots on the right for pivoting fill-in.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku, "({i},{j}) outside band");
        i * self.width + (j + self.kl - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku {
            return 0.0;
        }
        self.data[self.slot(i, j)]
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    pub fn clear_row(&mut self, i: usize) {
        let lo = i.saturating_sub(self.kl);
        let hi = (i + self.ku).min(self.n - 1);
        for j in lo..=hi {
            self.set(i, j, 0.0);
        }
    }

    pub fn row_range(&self, i: usize) -> std::ops::RangeInclusive<usize> {
        i.saturating_sub(self.kl)..=(i + self.ku).min(self.n - 1)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            *yi = self.row_range(i).map(|j| self.get(i, j) * x[j]).sum();
        }
    }

    /// Transposed product `y = Aᵀ x`.
    pub fn matvec_t(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, xi) in x.iter().enumerate().take(self.n) {
            for j in self.row_range(i) {
                y[j] += self.get(i, j) * xi;
            }
        }
    }

    pub fn factor(mut self) -> Result<BandLu> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let scale = self.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Singular(format!("matrix scale {scale}")));
        }
        let mut piv = vec![0; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.slot(k, k)].abs();
            for i in k + 1..=last_row {
                let v = self.data[self.slot(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= scale * 1e-300 {
                return Err(Error::Singular(format!("zero pivot at row {k}")));
            }
            piv[k] = p;
            if p != k {
                for j in k..=last_col {
                    let (a, b) = (self.slot(k, j), self.slot(p, j));
                    self.data.swap(a, b);
                }
            }
            let inv = 1.0 / self.data[self.slot(k, k)];
            for i in k + 1..=last_row {
                let sik = self.slot(i, k);
                let l = self.data[sik] * inv;
                if l == 0.0 {
                    continue;
                }
                self.data[sik] = l;
                let (rk, ri) = (self.slot(k, k), self.slot(i, k));
                for d in 1..=(last_col - k) {
                    self.data[ri + d] -= l * self.data[rk + d];
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let a = &self.m;
        let n = a.n;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for (i, bi) in b.iter_mut().enumerate().take((k + a.kl).min(n - 1) + 1).skip(k + 1) {
                    *bi -= a.data[a.slot(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let last = (k + a.kl + a.ku).min(n - 1);
            let rk = a.slot(k, k);
            let mut s = b[k];
            for d in 1..=(last - k) {
                s -= a.data[rk + d] * b[k + d];
            }
            b[k] = s / a.data[rk];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Solves `(T + a·e_rᵀ) x = b` given a factorization of `T`.
pub fn solve_rank_one_column(lu: &BandLu, a: &[f64], r: usize, b: &[f64]) -> Result<Vec<f64>> {
    let y = lu.solve(b);
    let z = lu.solve(a);
    let denom = 1.0 + z[r];
    if !denom.is_finite() || denom.abs() < 1e-14 * (1.0 + z[r].abs()) {
        return Err(Error::Singular(format!("bordered update denominator {denom}")));
    }
    let c = y[r] / denom;
    Ok(y.iter().zip(&z).map(|(yi, zi)| yi - c * zi).collect())
}

/// Least-squares coefficients `argmin ‖b − Σ γ_j cols_j‖₂` by modified Gram–Schmidt.
/// Columns that are numerically dependent on earlier ones get a zero coefficient.
pub fn least_squares(cols: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let k = cols.len();
    // (original column index, orthonormal vector)
    let mut q: Vec<(usize, Vec<f64>)> = Vec::with_capacity(k);
    let mut r = vec![vec![0.0; k]; k];
    for (j, c) in cols.iter().enumerate() {
        let norm0 = dot(c, c).sqrt();
        let mut v = c.clone();
        for (i, qi) in &q {
            let proj = dot(qi, &v);
            r[*i][j] = proj;
            v.iter_mut().zip(qi).for_each(|(a, b)| *a -= proj * b);
        }
        let nv = dot(&v, &v).sqrt();
        if nv > 0.0 && nv > 1e-10 * norm0 {
            r[j][j] = nv;
            v.iter_mut().for_each(|a| *a /= nv);
            q.push((j, v));
        }
    }
    let mut gamma = vec![0.0; k];
    for a in (0..q.len()).rev() {
        let (j, qj) = &q[a];
        let mut s = dot(qj, b);
        for (l, _) in &q[a + 1..] {
            s -= r[*j][*l] * gamma[*l];
        }
        gamma[*j] = s / r[*j][*j];
    }
    gamma
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(m: &BandMatrix) -> Vec<Vec<f64>> {
        (0..m.n).map(|i| (0..m.n).map(|j| m.get(i, j)).collect()).collect()
    }

    fn random_band(n: usize, kl: usize, ku: usize, seed: u64) -> BandMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BandMatrix::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                m.set(i, j, rng.random_range(-1.0..1.0));
            }
        }
        m
    }

    #[test]
    fn solves_random_banded_systems_with_pivoting() {
        for (n, kl, ku, seed) in [(1, 0, 0, 1), (7, 1, 1, 2), (30, 3, 2, 3), (50, 5, 5, 4), (40, 0, 3, 5)] {
            let m = random_band(n, kl, ku, seed);
            let d = dense(&m);
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + 1.0).collect();
            let mut b = vec![0.0; n];
            m.matvec(&x, &mut b);
            let got = m.clone().factor().unwrap().solve(&b);
            let mut back = vec![0.0; n];
            m.matvec(&got, &mut back);
            let err = back.iter().zip(&b).fold(0.0f64, |a, (g, e)| a.max((g - e).abs()));
            assert!(err < 1e-12, "n={n} err={err}");
            let mut bt = vec![0.0; n];
            m.matvec_t(&x, &mut bt);
            for j in 0..n {
                let expect: f64 = (0..n).map(|i| d[i][j] * x[i]).sum();
                assert!((bt[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn needs_pivoting() {
        let mut m = BandMatrix::zeros(3, 1, 1);
        m.set(0, 0, 0.0);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        m.set(1, 1, 0.0);
        m.set(1, 2, 2.0);
        m.set(2, 1, 3.0);
        m.set(2, 2, 1.0);
        let x = m.factor().unwrap().solve(&[1.0, 5.0, 5.0]);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14 && (x[2] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let m = BandMatrix::zeros(4, 1, 1);
        assert!(matches!(m.factor(), Err(Error::Singular(_))));
        let mut m = BandMatrix::zeros(2, 1, 1);
        m.set(0, 0, 1.0);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        m.set(1, 1, 1.0);
        assert!(m.factor().is_err());
    }

    #[test]
    fn rank_one_column_replacement() {
        let n = 12;
        let t = random_band(n, 2, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = 5;
        let x = solve_rank_one_column(&t.clone().factor().unwrap(), &a, r, &b).unwrap();
        let mut tx = vec![0.0; n];
        t.matvec(&x, &mut tx);
        for i in 0..n {
            assert!((tx[i] + a[i] * x[r] - b[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn least_squares_matches_normal_equations_and_drops_dependent_columns() {
        let a = vec![1.0, 2.0, 0.0, 1.0];
        let b = vec![0.0, 1.0, 1.0, 3.0];
        let dup: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let rhs = vec![1.0, 4.0, 2.0, 7.0];
        let g = least_squares(&[a.clone(), b.clone(), dup], &rhs);
        assert_eq!(g[2], 0.0);
        let fit: Vec<f64> = (0..4).map(|i| g[0] * a[i] + g[1] * b[i]).collect();
        let res: Vec<f64> = (0..4).map(|i| rhs[i] - fit[i]).collect();
        assert!(dot(&res, &a).abs() < 1e-12 && dot(&res, &b).abs() < 1e-12);
    }
}
