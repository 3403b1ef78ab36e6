//! Truncated Cartesian grids, grid functions and the finite-difference
//! operators built on them.
//!
//! Scalar fields live on nodes. Vector fields are normally staggered: the
//! component along axis `k` is stored on the face between a node and its
//! upper neighbour along `k`, indexed by the lower node. Slots whose node sits
//! on the upper boundary of axis `k` have no face and always hold zero, so
//! both locations use `dim × node_count` storage.
//!
//! With this layout `divergence` is the exact negative adjoint of the central
//! `gradient` under trapezoidal weights, and `laplacian` is their composition.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAX_DIM: usize = 2;

/// Coordinates of a point; entries past `Grid::dim` are zero.
pub type Point = [f64; MAX_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    half_width: f64,
    n: usize,
    h: f64,
}

impl Grid {
    pub fn new(dim: usize, half_width: f64, n: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(invalid(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(invalid(format!("half width must be positive, got {half_width}")));
        }
        if n < 3 || n % 2 == 0 {
            return Err(invalid(format!("points per axis must be odd and >= 3, got {n}")));
        }
        let h = 2.0 * half_width / (n - 1) as f64;
        Ok(Self { dim, half_width, n, h })
    }

    /// Coarsest grid whose spacing does not exceed `max_spacing`, with
    /// `n - 1` a multiple of `align` (rounded up to an even number).
    pub fn with_max_spacing(dim: usize, half_width: f64, max_spacing: f64, align: usize) -> Result<Self> {
        if !(max_spacing.is_finite() && max_spacing > 0.0) {
            return Err(invalid(format!("spacing must be positive, got {max_spacing}")));
        }
        let align = align.max(1);
        let align = if align % 2 == 0 { align } else { 2 * align };
        let cells = (2.0 * half_width / max_spacing * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let cells = cells.div_ceil(align) * align;
        Self::new(dim, half_width, cells + 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow(axis as u32)
    }

    /// Coordinate of index `i` along any axis; exactly symmetric, exactly 0 at the centre.
    pub fn coord(&self, i: usize) -> f64 {
        let c = (self.n - 1) as f64;
        self.half_width * (2.0 * i as f64 - c) / c
    }

    pub fn multi_index(&self, flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        let mut rest = flat;
        for slot in idx.iter_mut().take(self.dim) {
            *slot = rest % self.n;
            rest /= self.n;
        }
        idx
    }

    pub fn flat_index(&self, idx: [usize; MAX_DIM]) -> usize {
        (0..self.dim).map(|k| idx[k] * self.stride(k)).sum()
    }

    pub fn point(&self, flat: usize) -> Point {
        let idx = self.multi_index(flat);
        let mut p = [0.0; MAX_DIM];
        for k in 0..self.dim {
            p[k] = self.coord(idx[k]);
        }
        p
    }

    /// Centre of the axis-`axis` face above node `flat`.
    pub fn face_point(&self, axis: usize, flat: usize) -> Point {
        let mut p = self.point(flat);
        p[axis] += 0.5 * self.h;
        p
    }

    /// Node nearest to `p`, or `None` when `p` lies outside the box.
    pub fn nearest_node(&self, p: &Point) -> Option<usize> {
        let mut idx = [0; MAX_DIM];
        for k in 0..self.dim {
            let t = (p[k] + self.half_width) / self.h;
            if !(t > -0.5 && t < (self.n - 1) as f64 + 0.5) {
                return None;
            }
            idx[k] = (t.round() as usize).min(self.n - 1);
        }
        Some(self.flat_index(idx))
    }

    pub fn has_face(&self, axis: usize, flat: usize) -> bool {
        axis < self.dim && self.multi_index(flat)[axis] + 1 < self.n
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        let idx = self.multi_index(flat);
        (0..self.dim).any(|k| idx[k] == 0 || idx[k] + 1 == self.n)
    }

    fn axis_weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.n {
            0.5 * self.h
        } else {
            self.h
        }
    }

    /// Trapezoidal quadrature weight of a node.
    pub fn node_weight(&self, flat: usize) -> f64 {
        let idx = self.multi_index(flat);
        (0..self.dim).map(|k| self.axis_weight(idx[k])).product()
    }

    /// Quadrature weight of a face: `h` along the axis times the transverse
    /// trapezoid weights. Zero where the face does not exist.
    pub fn face_weight(&self, axis: usize, flat: usize) -> f64 {
        if !self.has_face(axis, flat) {
            return 0.0;
        }
        let idx = self.multi_index(flat);
        (0..self.dim).map(|k| if k == axis { self.h } else { self.axis_weight(idx[k]) }).product()
    }

    pub fn node_weights(&self) -> Vec<f64> {
        (0..self.node_count()).map(|i| self.node_weight(i)).collect()
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.dim as i32)
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Shape(format!("grids differ: {self:?} vs {other:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::Shape(format!("expected {} values, got {}", grid.node_count(), values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value {} at node {i}", values[i])));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.node_count()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&Point) -> f64) -> Self {
        let values = (0..grid.node_count()).map(|i| f(&grid.point(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { grid: self.grid, values })
    }

    pub fn integrate(&self) -> f64 {
        integrate(self)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// First node (in flat order) attaining the minimum.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v < self.values[best] {
                best = i;
            }
        }
        best
    }

    /// First node (in flat order) attaining the maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self.values.iter().zip(&other.values).enumerate().map(|(i, (a, b))| self.grid.node_weight(i) * (a - b).abs()).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().enumerate().map(|(i, v)| self.grid.node_weight(i) * v * v).sum::<f64>().sqrt()
    }

    /// Multilinear interpolation; `None` outside the box.
    pub fn sample(&self, p: &Point) -> Option<f64> {
        let g = &self.grid;
        let mut lo = [0usize; MAX_DIM];
        let mut t = [0.0; MAX_DIM];
        for k in 0..g.dim {
            let s = (p[k] + g.half_width) / g.h;
            let last = (g.n - 1) as f64;
            if !(s >= -1e-9 && s <= last + 1e-9) {
                return None;
            }
            let s = s.clamp(0.0, last);
            let i = (s.floor() as usize).min(g.n - 2);
            lo[k] = i;
            t[k] = s - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << g.dim) {
            let mut idx = lo;
            let mut w = 1.0;
            for k in 0..g.dim {
                if corner >> k & 1 == 1 {
                    idx[k] += 1;
                    w *= t[k];
                } else {
                    w *= 1.0 - t[k];
                }
            }
            if w != 0.0 {
                acc += w * self.values[g.flat_index(idx)];
            }
        }
        Some(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    Faces,
    Nodes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    location: Location,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: Grid, location: Location) -> Self {
        Self { grid, location, comps: vec![vec![0.0; grid.node_count()]; grid.dim] }
    }

    pub fn from_components(grid: Grid, location: Location, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.dim || comps.iter().any(|c| c.len() != grid.node_count()) {
            return Err(Error::Shape(format!("expected {} components of length {}", grid.dim, grid.node_count())));
        }
        for (k, c) in comps.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Domain(format!("non-finite component {k} at {i}")));
                }
                if location == Location::Faces && !grid.has_face(k, i) && *v != 0.0 {
                    return Err(Error::Shape(format!("value on missing face (axis {k}, node {i})")));
                }
            }
        }
        Ok(Self { grid, location, comps })
    }

    pub(crate) fn from_raw(grid: Grid, location: Location, comps: Vec<Vec<f64>>) -> Self {
        Self { grid, location, comps }
    }

    /// Samples `f` at face centres (staggered) or nodes.
    pub fn from_fn(grid: Grid, location: Location, f: impl Fn(usize, &Point) -> f64) -> Self {
        let comps = (0..grid.dim)
            .map(|k| {
                (0..grid.node_count())
                    .map(|i| match location {
                        Location::Nodes => f(k, &grid.point(i)),
                        Location::Faces if grid.has_face(k, i) => f(k, &grid.face_point(k, i)),
                        Location::Faces => 0.0,
                    })
                    .collect()
            })
            .collect();
        Self { grid, location, comps }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn location(&self) -> Location {
        self.location
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.comps[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    pub fn component_count(&self) -> usize {
        self.comps.iter().map(Vec::len).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flatten().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let comps = self.comps.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
        Self { grid: self.grid, location: self.location, comps }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        if self.location != other.location {
            return Err(Error::Shape("vector fields at different locations".into()));
        }
        let comps = self.comps.iter().zip(&other.comps).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        Ok(Self { grid: self.grid, location: self.location, comps })
    }

    /// Mean of `f` applied to the axis-`other` components on the (up to four)
    /// faces touching the axis-`axis` face above node `flat`.
    pub fn transverse_mean(&self, axis: usize, flat: usize, other: usize, f: impl Fn(f64) -> f64) -> f64 {
        let g = &self.grid;
        let (sa, so) = (g.stride(axis), g.stride(other));
        let io = g.multi_index(flat)[other];
        let c = &self.comps[other];
        let (mut acc, mut cnt) = (0.0, 0usize);
        for base in [flat, flat + sa] {
            if io + 1 < g.n {
                acc += f(c[base]);
                cnt += 1;
            }
            if io > 0 {
                acc += f(c[base - so]);
                cnt += 1;
            }
        }
        if cnt == 0 {
            0.0
        } else {
            acc / cnt as f64
        }
    }

    /// Squared norm at the axis-`axis` face above `flat`: own component plus
    /// transverse means of squares.
    pub fn face_norm_sq(&self, axis: usize, flat: usize) -> f64 {
        let own = self.comps[axis][flat];
        let mut s = own * own;
        for o in 0..self.grid.dim {
            if o != axis {
                s += self.transverse_mean(axis, flat, o, |v| v * v);
            }
        }
        s
    }

    /// Node values: averages of the adjacent existing faces, i.e. central
    /// differences inside and one-sided ones on the boundary.
    pub fn to_nodes(&self) -> Self {
        if self.location == Location::Nodes {
            return self.clone();
        }
        let g = self.grid;
        let comps = (0..g.dim)
            .map(|k| {
                let s = g.stride(k);
                let c = &self.comps[k];
                (0..g.node_count())
                    .map(|i| {
                        let ik = g.multi_index(i)[k];
                        match (ik > 0, ik + 1 < g.n) {
                            (true, true) => 0.5 * (c[i - s] + c[i]),
                            (false, _) => c[i],
                            (true, false) => c[i - s],
                        }
                    })
                    .collect()
            })
            .collect();
        Self { grid: g, location: Location::Nodes, comps }
    }

    /// Face values: arithmetic means of the two adjacent nodes.
    pub fn to_faces(&self) -> Self {
        if self.location == Location::Faces {
            return self.clone();
        }
        let g = self.grid;
        let comps = (0..g.dim)
            .map(|k| {
                let s = g.stride(k);
                let c = &self.comps[k];
                (0..g.node_count()).map(|i| if g.has_face(k, i) { 0.5 * (c[i] + c[i + s]) } else { 0.0 }).collect()
            })
            .collect();
        Self { grid: g, location: Location::Faces, comps }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GradientScheme<'a> {
    Central,
    /// First-order differences taken from the side the direction field points away from.
    Upwind(&'a VectorField),
}

/// `Central` returns face differences (exact on quadratics at face centres);
/// `Upwind` returns node-located one-sided differences.
pub fn gradient(f: &ScalarField, scheme: GradientScheme<'_>) -> Result<VectorField> {
    let g = f.grid;
    let v = &f.values;
    match scheme {
        GradientScheme::Central => {
            let inv_h = 1.0 / g.h;
            let comps = (0..g.dim)
                .map(|k| {
                    let s = g.stride(k);
                    (0..g.node_count()).map(|i| if g.has_face(k, i) { (v[i + s] - v[i]) * inv_h } else { 0.0 }).collect()
                })
                .collect();
            Ok(VectorField::from_raw(g, Location::Faces, comps))
        }
        GradientScheme::Upwind(dir) => {
            g.check_same(&dir.grid)?;
            let dir = dir.to_nodes();
            let comps = (0..g.dim)
                .map(|k| {
                    let s = g.stride(k);
                    (0..g.node_count())
                        .map(|i| {
                            let ik = g.multi_index(i)[k];
                            let backward = ik > 0 && (dir.comps[k][i] >= 0.0 || ik + 1 == g.n);
                            if backward {
                                (v[i] - v[i - s]) / g.h
                            } else {
                                (v[i + s] - v[i]) / g.h
                            }
                        })
                        .collect()
                })
                .collect();
            Ok(VectorField::from_raw(g, Location::Nodes, comps))
        }
    }
}

/// Zero-flux divergence. Node-located input is first averaged onto faces.
pub fn divergence(v: &VectorField) -> ScalarField {
    let v = v.to_faces();
    let g = v.grid;
    let mut out = vec![0.0; g.node_count()];
    for k in 0..g.dim {
        let s = g.stride(k);
        let c = &v.comps[k];
        for (i, o) in out.iter_mut().enumerate() {
            let ik = g.multi_index(i)[k];
            let up = if ik + 1 < g.n { c[i] } else { 0.0 };
            let down = if ik > 0 { c[i - s] } else { 0.0 };
            *o += (up - down) / g.axis_weight(ik);
        }
    }
    ScalarField::from_raw(g, out)
}

/// Compact `(2·dim+1)`-point Laplacian with zero-flux closure.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let g = f.grid;
    let v = &f.values;
    let inv_h = 1.0 / g.h;
    let mut out = vec![0.0; g.node_count()];
    for k in 0..g.dim {
        let s = g.stride(k);
        for (i, o) in out.iter_mut().enumerate() {
            let ik = g.multi_index(i)[k];
            let up = if ik + 1 < g.n { (v[i + s] - v[i]) * inv_h } else { 0.0 };
            let down = if ik > 0 { (v[i] - v[i - s]) * inv_h } else { 0.0 };
            *o += (up - down) / g.axis_weight(ik);
        }
    }
    ScalarField::from_raw(g, out)
}

pub fn integrate(f: &ScalarField) -> f64 {
    f.values.iter().enumerate().map(|(i, v)| f.grid.node_weight(i) * v).sum()
}

/// `Σ_faces weight · a · b` over all face families.
pub fn inner_faces(a: &VectorField, b: &VectorField) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    let (a, b) = (a.to_faces(), b.to_faces());
    let g = a.grid;
    Ok((0..g.dim).map(|k| (0..g.node_count()).map(|i| g.face_weight(k, i) * a.comps[k][i] * b.comps[k][i]).sum::<f64>()).sum())
}
