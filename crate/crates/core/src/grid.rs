//! Regular-grid fields, multilinear sampling, map composition and
//! finite-difference operators.
//!
//! Everything is stored row-major with x fastest. A 2D grid is carried
//! internally as a 3D grid with a single z plane; the z axis is inactive for
//! sampling and differencing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a regular grid in physical (mm) coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecRepr", into = "GridSpecRepr")]
pub struct GridSpec {
    ndim: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpecRepr {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl TryFrom<GridSpecRepr> for GridSpec {
    type Error = Error;
    fn try_from(r: GridSpecRepr) -> Result<Self> {
        GridSpec::new(&r.dims, &r.spacing, &r.origin)
    }
}

impl From<GridSpec> for GridSpecRepr {
    fn from(g: GridSpec) -> Self {
        GridSpecRepr {
            dims: g.dims().to_vec(),
            spacing: g.spacing().to_vec(),
            origin: g.origin().to_vec(),
        }
    }
}

impl GridSpec {
    pub fn new(dims: &[usize], spacing: &[f64], origin: &[f64]) -> Result<Self> {
        let ndim = dims.len();
        if !(2..=3).contains(&ndim) {
            return Err(Error::InvalidGrid(format!("dimensionality {ndim} not in {{2,3}}")));
        }
        if spacing.len() != ndim || origin.len() != ndim {
            return Err(Error::InvalidGrid(
                "dims, spacing and origin must have equal length".into(),
            ));
        }
        if let Some(n) = dims.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidGrid(format!("axis with {n} points (need >= 2)")));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidGrid("spacing must be positive and finite".into()));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        let mut g = GridSpec {
            ndim,
            dims: [1; 3],
            spacing: [1.0; 3],
            origin: [0.0; 3],
        };
        g.dims[..ndim].copy_from_slice(dims);
        g.spacing[..ndim].copy_from_slice(spacing);
        g.origin[..ndim].copy_from_slice(origin);
        Ok(g)
    }

    /// Unit-spacing grid anchored at the origin.
    pub fn unit(dims: &[usize]) -> Result<Self> {
        let n = dims.len();
        GridSpec::new(dims, &vec![1.0; n], &vec![0.0; n])
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.ndim]
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.ndim]
    }

    pub(crate) fn dims3(&self) -> [usize; 3] {
        self.dims
    }

    pub(crate) fn spacing3(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest physical side length, `(n - 1) * h` over axes.
    pub fn extent(&self) -> f64 {
        (0..self.ndim)
            .map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
            .fold(0.0, f64::max)
    }

    pub(crate) fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        let i = flat % self.dims[0];
        let rest = flat / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Physical position of a grid point (unused axes are zero).
    pub fn position(&self, flat: usize) -> [f64; 3] {
        let idx = self.unflatten(flat);
        let mut p = [0.0; 3];
        for a in 0..self.ndim {
            p[a] = self.origin[a] + idx[a] as f64 * self.spacing[a];
        }
        p
    }

    /// True when the point is at least `margin` grid points away from every border.
    pub fn is_interior(&self, flat: usize, margin: usize) -> bool {
        let idx = self.unflatten(flat);
        (0..self.ndim).all(|a| idx[a] >= margin && idx[a] + margin < self.dims[a])
    }

    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self == other
    }

    pub(crate) fn check_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self.ndim != other.ndim {
            return Err(Error::DimensionMismatch {
                expected: self.ndim,
                found: other.ndim,
            });
        }
        if self != other {
            return Err(Error::GridMismatch(format!("{what}: {self:?} vs {other:?}")));
        }
        Ok(())
    }

    pub(crate) fn check_ndim(&self, other: &GridSpec) -> Result<()> {
        if self.ndim != other.ndim {
            return Err(Error::DimensionMismatch {
                expected: self.ndim,
                found: other.ndim,
            });
        }
        Ok(())
    }

    /// Grid covering the same physical box with roughly `factor` times fewer
    /// points per axis.
    pub fn coarsened(&self, factor: usize) -> GridSpec {
        if factor <= 1 {
            return self.clone();
        }
        let mut g = self.clone();
        for a in 0..self.ndim {
            let n = self.dims[a];
            let m = ((n - 1) as f64 / factor as f64).ceil() as usize + 1;
            let m = m.max(2);
            g.dims[a] = m;
            g.spacing[a] = (n - 1) as f64 * self.spacing[a] / (m - 1) as f64;
        }
        g
    }

    #[inline]
    fn axis_sample(&self, p: [f64; 3], a: usize) -> AxisSample {
        let n = self.dims[a];
        if a >= self.ndim || n == 1 {
            return AxisSample { i0: 0, frac: 0.0, dq: 0.0, active: false };
        }
        let mut q = (p[a] - self.origin[a]) / self.spacing[a];
        // Grid-point queries must hit the stored value exactly even when
        // origin + i*h does not round-trip through the division.
        let r = q.round();
        if (q - r).abs() < 1e-10 {
            q = r;
        }
        let max = (n - 1) as f64;
        let (q, inside) = if q <= 0.0 {
            (0.0, false)
        } else if q >= max {
            (max, false)
        } else {
            (q, true)
        };
        let i0 = (q.floor() as usize).min(n - 2);
        AxisSample {
            i0,
            frac: q - i0 as f64,
            dq: if inside { 1.0 / self.spacing[a] } else { 0.0 },
            active: true,
        }
    }

    /// Multilinear stencil with clamp-to-border coordinates.
    #[inline]
    pub(crate) fn stencil(&self, p: [f64; 3]) -> Stencil {
        let ax = [self.axis_sample(p, 0), self.axis_sample(p, 1), self.axis_sample(p, 2)];
        let mut st = self.strides();
        for a in 0..3 {
            if !ax[a].active {
                st[a] = 0;
            }
        }
        let base = ax[0].i0 * st[0] + ax[1].i0 * st[1] + ax[2].i0 * st[2];
        let n = if ax[2].active { 8 } else { 4 };
        let mut s = Stencil { idx: [base; 8], w: [0.0; 8], n, f: [[1.0, 0.0]; 3], dq: [0.0; 3] };
        for a in 0..3 {
            if ax[a].active {
                s.f[a] = [1.0 - ax[a].frac, ax[a].frac];
                s.dq[a] = ax[a].dq;
            }
        }
        for c in 0..n {
            let (b0, b1, b2) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            s.idx[c] = base + b0 * st[0] + b1 * st[1] + b2 * st[2];
            s.w[c] = s.f[0][b0] * s.f[1][b1] * s.f[2][b2];
        }
        s
    }
}

#[derive(Clone, Copy)]
struct AxisSample {
    i0: usize,
    frac: f64,
    /// d(index coordinate)/d(physical coordinate); zero where clamped.
    dq: f64,
    active: bool,
}

/// Corner indices and weights of one multilinear sample. Axes that are
/// inactive carry factors (1, 0), so their upper corners get zero weight.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub n: usize,
    /// Per-axis (lower, upper) interpolation factors.
    f: [[f64; 2]; 3],
    dq: [f64; 3],
}

impl Stencil {
    #[inline]
    pub fn sample(&self, f: &[f64]) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.n {
            acc += self.w[c] * f[self.idx[c]];
        }
        acc
    }

    /// Gradient of the sampled value with respect to the query position.
    #[inline]
    pub fn sample_grad(&self, f: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        let ff = &self.f;
        for c in 0..self.n {
            let v = f[self.idx[c]];
            let (b0, b1, b2) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let sgn = |b: usize| if b == 1 { 1.0 } else { -1.0 };
            g[0] += v * sgn(b0) * self.dq[0] * ff[1][b1] * ff[2][b2];
            g[1] += v * sgn(b1) * self.dq[1] * ff[0][b0] * ff[2][b2];
            g[2] += v * sgn(b2) * self.dq[2] * ff[0][b0] * ff[1][b1];
        }
        g
    }

    /// Transpose of `sample`: scatter `value` into `out` with the stencil weights.
    #[inline]
    pub fn scatter(&self, value: f64, out: &mut [f64]) {
        for c in 0..self.n {
            out[self.idx[c]] += self.w[c] * value;
        }
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// A real-valued image on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values, "scalar field")?;
        Ok(ScalarField { grid, values })
    }

    pub(crate) fn from_parts(grid: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        ScalarField { grid, values }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        let n = grid.len();
        ScalarField { grid, values: vec![c; n] }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sum of squared differences times voxel volume.
    pub fn ssd(&self, other: &ScalarField) -> Result<f64> {
        self.grid.check_same(&other.grid, "ssd")?;
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(s * self.grid.voxel_volume())
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-point d-vectors, stored one plane per component.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: GridSpec, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.ndim() || comps.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::GridMismatch(format!(
                "vector field needs {} components of {} values",
                grid.ndim(),
                grid.len()
            )));
        }
        for c in &comps {
            check_finite(c, "vector field")?;
        }
        Ok(VectorField { grid, comps })
    }

    pub(crate) fn from_parts(grid: GridSpec, comps: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(comps.len(), grid.ndim());
        VectorField { grid, comps }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let comps = vec![vec![0.0; grid.len()]; grid.ndim()];
        VectorField { grid, comps }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let d = grid.ndim();
        let mut comps = vec![vec![0.0; grid.len()]; d];
        for i in 0..grid.len() {
            let v = f(grid.position(i));
            for a in 0..d {
                comps[a][i] = v[a];
            }
        }
        VectorField { grid, comps }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    pub fn component(&self, a: usize) -> &[f64] {
        &self.comps[a]
    }

    pub fn into_components(self) -> Vec<Vec<f64>> {
        self.comps
    }

    pub fn scale(&self, s: f64) -> VectorField {
        let comps = self
            .comps
            .iter()
            .map(|c| c.iter().map(|x| x * s).collect())
            .collect();
        VectorField { grid: self.grid.clone(), comps }
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &VectorField) -> Result<VectorField> {
        self.grid.check_same(&other.grid, "axpy")?;
        let comps = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + s * y).collect())
            .collect();
        Ok(VectorField { grid: self.grid.clone(), comps })
    }

    /// Euclidean norm of all components, without voxel-volume weighting.
    pub fn l2_norm(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|x| x.is_finite()))
    }
}

/// A map `x -> phi(x)` stored as physical coordinates at each grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationMap {
    grid: GridSpec,
    coords: Vec<Vec<f64>>,
}

impl DeformationMap {
    pub fn new(grid: GridSpec, coords: Vec<Vec<f64>>) -> Result<Self> {
        if coords.len() != grid.ndim() || coords.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::GridMismatch(format!(
                "map needs {} coordinate planes of {} values",
                grid.ndim(),
                grid.len()
            )));
        }
        for c in &coords {
            check_finite(c, "deformation map")?;
        }
        Ok(DeformationMap { grid, coords })
    }

    pub(crate) fn from_parts(grid: GridSpec, coords: Vec<Vec<f64>>) -> Self {
        DeformationMap { grid, coords }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn coords(&self) -> &[Vec<f64>] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<Vec<f64>> {
        self.coords
    }

    #[inline]
    pub fn point(&self, flat: usize) -> [f64; 3] {
        let mut p = [0.0; 3];
        for (a, c) in self.coords.iter().enumerate() {
            p[a] = c[flat];
        }
        p
    }

    /// `x + u(x)`
    pub fn from_displacement(u: &VectorField) -> DeformationMap {
        let id = identity_map(u.grid());
        let coords = id
            .coords
            .iter()
            .zip(u.components())
            .map(|(x, d)| x.iter().zip(d).map(|(a, b)| a + b).collect())
            .collect();
        DeformationMap { grid: u.grid().clone(), coords }
    }

    /// `phi(x) - x`
    pub fn displacement(&self) -> VectorField {
        let id = identity_map(&self.grid);
        let comps = self
            .coords
            .iter()
            .zip(&id.coords)
            .map(|(p, x)| p.iter().zip(x).map(|(a, b)| a - b).collect())
            .collect();
        VectorField::from_parts(self.grid.clone(), comps)
    }

    /// Max over points (optionally interior only) of `|phi(x) - x|`.
    pub fn max_deviation_from_identity(&self, interior_margin: usize) -> f64 {
        let id = identity_map(&self.grid);
        let mut worst: f64 = 0.0;
        for i in 0..self.grid.len() {
            if interior_margin > 0 && !self.grid.is_interior(i, interior_margin) {
                continue;
            }
            let mut d2 = 0.0;
            for a in 0..self.grid.ndim() {
                let d = self.coords[a][i] - id.coords[a][i];
                d2 += d * d;
            }
            worst = worst.max(d2.sqrt());
        }
        worst
    }
}

/// The map `x -> x` with coordinates exactly `origin + i * spacing`.
pub fn identity_map(grid: &GridSpec) -> DeformationMap {
    let d = grid.ndim();
    let mut coords = vec![vec![0.0; grid.len()]; d];
    for i in 0..grid.len() {
        let p = grid.position(i);
        for a in 0..d {
            coords[a][i] = p[a];
        }
    }
    DeformationMap { grid: grid.clone(), coords }
}

/// Anything that can be sampled at arbitrary physical points.
pub trait Interpolate: Sized {
    /// Multilinear samples at `points`, clamped to the border. The result lives
    /// on `points`' grid.
    fn interpolate(&self, points: &DeformationMap) -> Result<Self>;
}

pub(crate) fn sample_planes(grid: &GridSpec, planes: &[Vec<f64>], points: &DeformationMap) -> Vec<Vec<f64>> {
    let n = points.grid.len();
    let mut out = vec![vec![0.0; n]; planes.len()];
    for i in 0..n {
        let s = grid.stencil(points.point(i));
        for (o, f) in out.iter_mut().zip(planes) {
            o[i] = s.sample(f);
        }
    }
    out
}

impl Interpolate for ScalarField {
    fn interpolate(&self, points: &DeformationMap) -> Result<Self> {
        self.grid.check_ndim(&points.grid)?;
        let mut out = sample_planes(&self.grid, std::slice::from_ref(&self.values), points);
        Ok(ScalarField::from_parts(points.grid.clone(), out.pop().unwrap()))
    }
}

impl Interpolate for VectorField {
    fn interpolate(&self, points: &DeformationMap) -> Result<Self> {
        self.grid.check_ndim(&points.grid)?;
        let comps = sample_planes(&self.grid, &self.comps, points);
        Ok(VectorField::from_parts(points.grid.clone(), comps))
    }
}

impl Interpolate for DeformationMap {
    fn interpolate(&self, points: &DeformationMap) -> Result<Self> {
        self.grid.check_ndim(&points.grid)?;
        let coords = sample_planes(&self.grid, &self.coords, points);
        Ok(DeformationMap::from_parts(points.grid.clone(), coords))
    }
}

pub fn interpolate<F: Interpolate>(field: &F, points: &DeformationMap) -> Result<F> {
    field.interpolate(points)
}

/// `(outer ∘ inner)(x) = outer(inner(x))`, sampled on `inner`'s grid.
pub fn compose_maps(outer: &DeformationMap, inner: &DeformationMap) -> Result<DeformationMap> {
    outer.interpolate(inner)
}

/// Finite difference along `axis`: central in the interior, one-sided at the
/// two borders, scaled by 1/spacing. Writes into `out`.
pub(crate) fn diff_axis(grid: &GridSpec, f: &[f64], axis: usize, out: &mut [f64]) {
    let dims = grid.dims3();
    let n = dims[axis];
    let s = grid.strides()[axis];
    let h = grid.spacing3()[axis];
    let inv_h = 1.0 / h;
    let inv_2h = 0.5 / h;
    for p in 0..f.len() {
        let i = (p / s) % n;
        out[p] = if i == 0 {
            (f[p + s] - f[p]) * inv_h
        } else if i == n - 1 {
            (f[p] - f[p - s]) * inv_h
        } else {
            (f[p + s] - f[p - s]) * inv_2h
        };
    }
}

/// Accumulates the transpose of [`diff_axis`] applied to `g` into `out`.
pub(crate) fn diff_axis_adjoint_add(grid: &GridSpec, g: &[f64], axis: usize, out: &mut [f64]) {
    let dims = grid.dims3();
    let n = dims[axis];
    let s = grid.strides()[axis];
    let h = grid.spacing3()[axis];
    let inv_h = 1.0 / h;
    let inv_2h = 0.5 / h;
    for p in 0..g.len() {
        let i = (p / s) % n;
        let gp = g[p];
        if i == 0 {
            out[p + s] += gp * inv_h;
            out[p] -= gp * inv_h;
        } else if i == n - 1 {
            out[p] += gp * inv_h;
            out[p - s] -= gp * inv_h;
        } else {
            out[p + s] += gp * inv_2h;
            out[p - s] -= gp * inv_2h;
        }
    }
}

pub(crate) fn diff(grid: &GridSpec, f: &[f64], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    diff_axis(grid, f, axis, &mut out);
    out
}

pub fn gradient(field: &ScalarField) -> VectorField {
    let g = &field.grid;
    let comps = (0..g.ndim()).map(|a| diff(g, &field.values, a)).collect();
    VectorField::from_parts(g.clone(), comps)
}

pub fn divergence(v: &VectorField) -> ScalarField {
    let g = &v.grid;
    let mut acc = vec![0.0; g.len()];
    let mut tmp = vec![0.0; g.len()];
    for a in 0..g.ndim() {
        diff_axis(g, &v.comps[a], a, &mut tmp);
        for (x, d) in acc.iter_mut().zip(&tmp) {
            *x += d;
        }
    }
    ScalarField::from_parts(g.clone(), acc)
}

/// Determinant of the finite-difference Jacobian of a map at each point.
pub fn jacobian_determinant(map: &DeformationMap) -> ScalarField {
    let g = &map.grid;
    let d = g.ndim();
    // jac[a][b] = d phi_a / d x_b = delta_ab + d u_a / d x_b. Differencing the
    // displacement keeps the identity exact on any origin and spacing.
    let u = map.displacement();
    let jac: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    let mut col = diff(g, u.component(a), b);
                    if a == b {
                        col.iter_mut().for_each(|x| *x += 1.0);
                    }
                    col
                })
                .collect()
        })
        .collect();
    let values = (0..g.len())
        .map(|i| {
            if d == 2 {
                jac[0][0][i] * jac[1][1][i] - jac[0][1][i] * jac[1][0][i]
            } else {
                let m = |a: usize, b: usize| jac[a][b][i];
                m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                    - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                    + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
            }
        })
        .collect();
    ScalarField::from_parts(g.clone(), values)
}

pub fn min_jacobian_determinant(map: &DeformationMap) -> f64 {
    jacobian_determinant(map).min()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(n: usize) -> GridSpec {
        GridSpec::unit(&[n, n]).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(&[1, 4], &[1.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(GridSpec::new(&[4, 4], &[0.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(GridSpec::new(&[4], &[1.0], &[0.0]).is_err());
        assert!(GridSpec::new(&[4, 4, 4, 4], &[1.0; 4], &[0.0; 4]).is_err());
        assert!(GridSpec::new(&[4, 4], &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_2x2() {
        let id = identity_map(&grid2(2));
        assert_eq!(id.coords()[0], vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(id.coords()[1], vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn identity_3d_anisotropic() {
        let g = GridSpec::new(&[4, 4, 4], &[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        let id = identity_map(&g);
        let p = id.point(g.flat_index([1, 1, 1]));
        assert_eq!(p, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn interpolate_identity_is_exact() {
        let g = GridSpec::new(&[7, 5], &[0.7, 1.3], &[-2.0, 3.0]).unwrap();
        let f = ScalarField::from_fn(g.clone(), |p| (p[0] * 1.7).sin() + p[1] * p[1]);
        let out = f.interpolate(&identity_map(&g)).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn interpolate_ramp_midpoint() {
        let g = grid2(4);
        let f = ScalarField::from_fn(g.clone(), |p| p[0]);
        let pts = DeformationMap::new(
            GridSpec::unit(&[2, 2]).unwrap(),
            vec![vec![0.5; 4], vec![1.0; 4]],
        )
        .unwrap();
        let out = f.interpolate(&pts).unwrap();
        assert!(out.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn interpolate_constant_anywhere() {
        let g = grid2(5);
        let f = ScalarField::constant(g.clone(), 2.5);
        let pts = DeformationMap::new(
            g.clone(),
            vec![
                (0..25).map(|i| i as f64 * 0.37 - 3.0).collect(),
                (0..25).map(|i| 10.0 - i as f64 * 0.61).collect(),
            ],
        )
        .unwrap();
        let out = f.interpolate(&pts).unwrap();
        assert!(out.values().iter().all(|&v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn interpolate_dimension_mismatch() {
        let f = ScalarField::zeros(grid2(4));
        let pts = identity_map(&GridSpec::unit(&[3, 3, 3]).unwrap());
        assert!(matches!(f.interpolate(&pts), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn compose_translations() {
        let g = grid2(16);
        let a = DeformationMap::from_displacement(&VectorField::from_fn(g.clone(), |_| [1.5, -0.5, 0.0]));
        let b = DeformationMap::from_displacement(&VectorField::from_fn(g.clone(), |_| [0.25, 2.0, 0.0]));
        let c = compose_maps(&a, &b).unwrap();
        for i in 0..g.len() {
            if !g.is_interior(i, 4) {
                continue;
            }
            let x = g.position(i);
            let p = c.point(i);
            assert!((p[0] - (x[0] + 1.75)).abs() < 1e-12);
            assert!((p[1] - (x[1] + 1.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_identity_identity() {
        let g = GridSpec::new(&[5, 6, 4], &[1.0, 0.5, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        let id = identity_map(&g);
        let c = compose_maps(&id, &id).unwrap();
        for a in 0..3 {
            for (x, y) in c.coords()[a].iter().zip(&id.coords()[a]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_ramp_and_bilinear() {
        let g = grid2(5);
        let f = ScalarField::from_fn(g.clone(), |p| 3.0 * p[0]);
        let gr = gradient(&f);
        assert!(gr.component(0).iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(gr.component(1).iter().all(|&v| v.abs() < 1e-12));

        let f = ScalarField::from_fn(g.clone(), |p| p[0] * p[1]);
        let gr = gradient(&f);
        for i in 0..g.len() {
            if g.is_interior(i, 1) {
                let p = g.position(i);
                assert!((gr.component(0)[i] - p[1]).abs() < 1e-12);
                assert!((gr.component(1)[i] - p[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_respects_spacing() {
        let g = GridSpec::new(&[6, 6], &[0.5, 2.0], &[0.0, 0.0]).unwrap();
        let f = ScalarField::from_fn(g.clone(), |p| 2.0 * p[0] - p[1]);
        let gr = gradient(&f);
        assert!(gr.component(0).iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(gr.component(1).iter().all(|&v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn divergence_cases() {
        let g = grid2(6);
        let c = VectorField::from_fn(g.clone(), |_| [1.0, -2.0, 0.0]);
        assert!(divergence(&c).values().iter().all(|v| v.abs() < 1e-14));
        let v = VectorField::from_fn(g.clone(), |p| [p[0], 0.0, 0.0]);
        assert!(divergence(&v).values().iter().all(|x| (x - 1.0).abs() < 1e-12));
        let v = VectorField::from_fn(g.clone(), |p| [p[0], p[1], 0.0]);
        assert!(divergence(&v).values().iter().all(|x| (x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn jacobian_identity_and_scaling() {
        let g = GridSpec::new(&[6, 5], &[0.3, 1.1], &[2.0, -1.0]).unwrap();
        assert!(jacobian_determinant(&identity_map(&g)).values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let g = grid2(6);
        let id = identity_map(&g);
        let scaled = DeformationMap::new(
            g.clone(),
            id.coords().iter().map(|c| c.iter().map(|x| 2.0 * x).collect()).collect(),
        )
        .unwrap();
        assert!(jacobian_determinant(&scaled).values().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        let g3 = GridSpec::unit(&[4, 4, 4]).unwrap();
        assert!(jacobian_determinant(&identity_map(&g3)).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn diff_adjoint_matches_transpose() {
        let g = GridSpec::new(&[5, 4, 3], &[0.5, 1.0, 2.0], &[0.0; 3]).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let h: Vec<f64> = (0..g.len()).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        for axis in 0..3 {
            let df = diff(&g, &f, axis);
            let mut dth = vec![0.0; g.len()];
            diff_axis_adjoint_add(&g, &h, axis, &mut dth);
            let lhs: f64 = df.iter().zip(&h).map(|(a, b)| a * b).sum();
            let rhs: f64 = f.iter().zip(&dth).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn stencil_gradient_matches_difference() {
        let g = GridSpec::new(&[6, 5, 4], &[0.5, 1.0, 2.0], &[0.0; 3]).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|i| ((i * 31) % 17) as f64 * 0.1).collect();
        let p = [1.23, 2.71, 3.3];
        let gr = g.stencil(p).sample_grad(&f);
        for a in 0..3 {
            let eps = 1e-6;
            let mut pp = p;
            let mut pm = p;
            pp[a] += eps;
            pm[a] -= eps;
            let fd = (g.stencil(pp).sample(&f) - g.stencil(pm).sample(&f)) / (2.0 * eps);
            assert!((fd - gr[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", gr[a]);
        }
    }

    #[test]
    fn coarsened_preserves_extent() {
        let g = grid2(64);
        let c = g.coarsened(4);
        assert_eq!(c.dims(), &[17, 17]);
        assert!((c.extent() - g.extent()).abs() < 1e-12);
    }
}
