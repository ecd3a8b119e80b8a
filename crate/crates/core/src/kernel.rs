//! Multi-Gaussian smoothing `v = K ⋆ m`.
//!
//! Each Gaussian is sampled on the grid, truncated at 4σ and normalized to unit
//! sum per axis. Borders use half-sample symmetric reflection, which keeps the
//! operator symmetric (self-adjoint under [`inner_product`]) and makes it
//! preserve constants. Reflection makes the operator a circular convolution
//! on the mirrored 2n-periodic signal, so it is applied spectrally; the
//! separable spatial route computes the same operator directly and is kept as
//! a reference.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, VectorField};

const TRUNCATION_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    /// Standard deviation in mm.
    pub sigma: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GaussianComponent>", into = "Vec<GaussianComponent>")]
pub struct KernelSpec {
    components: Vec<GaussianComponent>,
}

impl TryFrom<Vec<GaussianComponent>> for KernelSpec {
    type Error = Error;
    fn try_from(c: Vec<GaussianComponent>) -> Result<Self> {
        KernelSpec::new(c)
    }
}

impl From<KernelSpec> for Vec<GaussianComponent> {
    fn from(k: KernelSpec) -> Self {
        k.components
    }
}

impl KernelSpec {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidKernel("no components".into()));
        }
        if components.iter().any(|c| !(c.sigma > 0.0 && c.sigma.is_finite())) {
            return Err(Error::InvalidKernel("sigma must be positive".into()));
        }
        if components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(Error::InvalidKernel("weights must be nonnegative".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidKernel(format!("weights sum to {total}, expected 1")));
        }
        Ok(KernelSpec { components })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        KernelSpec::new(vec![GaussianComponent { sigma, weight: 1.0 }])
    }

    /// Equal-weight mixture with the given sigmas (mm).
    pub fn equal_weights(sigmas: &[f64]) -> Result<Self> {
        let w = 1.0 / sigmas.len().max(1) as f64;
        KernelSpec::new(
            sigmas
                .iter()
                .map(|&sigma| GaussianComponent { sigma, weight: w })
                .collect(),
        )
    }

    /// Sigmas given as fractions of the grid's physical extent.
    pub fn relative(grid: &GridSpec, fractions: &[f64], weights: &[f64]) -> Result<Self> {
        if fractions.len() != weights.len() {
            return Err(Error::InvalidKernel("fractions and weights differ in length".into()));
        }
        let extent = grid.extent();
        KernelSpec::new(
            fractions
                .iter()
                .zip(weights)
                .map(|(&f, &weight)| GaussianComponent { sigma: f * extent, weight })
                .collect(),
        )
    }

    /// Sigmas 0.05, 0.1 and 0.15 of the domain extent, equal weights.
    pub fn default_for_grid(grid: &GridSpec) -> Self {
        let w = 1.0 / 3.0;
        KernelSpec::relative(grid, &[0.05, 0.1, 0.15], &[w, w, w])
            .expect("default kernel is valid")
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }
}

/// Normalized, truncated samples `g[k]`, `k = -r..=r`.
pub(crate) fn gaussian_taps(sigma: f64, h: f64) -> Vec<f64> {
    let r = (TRUNCATION_SIGMAS * sigma / h).ceil() as i64;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|k| {
            let x = k as f64 * h;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Maps any integer index onto `0..n` by half-sample symmetric reflection.
#[inline]
fn reflect(j: i64, n: usize) -> usize {
    let p = 2 * n as i64;
    let j = j.rem_euclid(p) as usize;
    if j < n {
        j
    } else {
        2 * n - 1 - j
    }
}

/// Precomputed smoothing operator for one grid and kernel.
pub struct Smoother {
    grid: GridSpec,
    spec: KernelSpec,
    ext: [usize; 3],
    multiplier: Vec<f64>,
    forward: Vec<Option<Arc<dyn Fft<f64>>>>,
    inverse: Vec<Option<Arc<dyn Fft<f64>>>>,
}

impl std::fmt::Debug for Smoother {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Smoother")
            .field("grid", &self.grid)
            .field("spec", &self.spec)
            .finish()
    }
}

impl Smoother {
    pub fn new(grid: &GridSpec, spec: &KernelSpec) -> Smoother {
        let d = grid.ndim();
        let dims = grid.dims3();
        let h = grid.spacing3();
        let mut ext = [1usize; 3];
        for a in 0..d {
            ext[a] = 2 * dims[a];
        }
        let mut planner = FftPlanner::<f64>::new();
        let mut forward = Vec::new();
        let mut inverse = Vec::new();
        for a in 0..3 {
            if a < d {
                forward.push(Some(planner.plan_fft_forward(ext[a])));
                inverse.push(Some(planner.plan_fft_inverse(ext[a])));
            } else {
                forward.push(None);
                inverse.push(None);
            }
        }

        let total: usize = ext.iter().product();
        let mut multiplier = vec![0.0; total];
        for comp in spec.components() {
            // Real spectrum of the periodized symmetric kernel, per axis.
            let spectra: Vec<Vec<f64>> = (0..3)
                .map(|a| {
                    if a >= d {
                        return vec![1.0];
                    }
                    let p = ext[a];
                    let taps = gaussian_taps(comp.sigma, h[a]);
                    let r = (taps.len() / 2) as i64;
                    let mut periodic = vec![0.0; p];
                    for (k, t) in (-r..=r).zip(&taps) {
                        periodic[k.rem_euclid(p as i64) as usize] += t;
                    }
                    (0..p)
                        .map(|w| {
                            periodic
                                .iter()
                                .enumerate()
                                .map(|(j, g)| {
                                    g * (2.0 * std::f64::consts::PI * ((w * j) % p) as f64
                                        / p as f64)
                                        .cos()
                                })
                                .sum()
                        })
                        .collect()
                })
                .collect();
            for k in 0..ext[2] {
                for j in 0..ext[1] {
                    let sjk = spectra[1][j] * spectra[2][k];
                    let row = (k * ext[1] + j) * ext[0];
                    for i in 0..ext[0] {
                        multiplier[row + i] += comp.weight * spectra[0][i] * sjk;
                    }
                }
            }
        }
        let norm = 1.0 / total as f64;
        multiplier.iter_mut().for_each(|m| *m *= norm);

        Smoother {
            grid: grid.clone(),
            spec: spec.clone(),
            ext,
            multiplier,
            forward,
            inverse,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let e = self.ext;
        let strides = [1, e[0], e[0] * e[1]];
        let plans = if inverse { &self.inverse } else { &self.forward };
        for a in 0..self.grid.ndim() {
            let plan = plans[a].as_ref().unwrap();
            if a == 0 {
                plan.process(buf);
                continue;
            }
            let n = e[a];
            let s = strides[a];
            let mut line = vec![Complex64::new(0.0, 0.0); n];
            let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
            let outer = buf.len() / n;
            for o in 0..outer {
                // o enumerates every line along axis a.
                let lo = o % s;
                let hi = o / s;
                let start = lo + hi * s * n;
                for (t, l) in line.iter_mut().enumerate() {
                    *l = buf[start + t * s];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (t, l) in line.iter().enumerate() {
                    buf[start + t * s] = *l;
                }
            }
        }
    }

    /// Smooths two planes at once, packed as real and imaginary parts.
    fn smooth_pair(&self, re: &[f64], im: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        let dims = self.grid.dims3();
        let e = self.ext;
        let mut buf = vec![Complex64::new(0.0, 0.0); e.iter().product()];
        let mut src = 0usize;
        let rx: Vec<usize> = (0..e[0]).map(|i| reflect(i as i64, dims[0])).collect();
        let ry: Vec<usize> = (0..e[1]).map(|i| reflect(i as i64, dims[1])).collect();
        let rz: Vec<usize> = (0..e[2]).map(|i| reflect(i as i64, dims[2])).collect();
        for k in 0..e[2] {
            for j in 0..e[1] {
                let srow = (rz[k] * dims[1] + ry[j]) * dims[0];
                for i in 0..e[0] {
                    let p = srow + rx[i];
                    buf[src] = Complex64::new(re[p], im.map_or(0.0, |m| m[p]));
                    src += 1;
                }
            }
        }
        self.transform(&mut buf, false);
        for (b, m) in buf.iter_mut().zip(&self.multiplier) {
            *b *= *m;
        }
        self.transform(&mut buf, true);
        let n = self.grid.len();
        let mut out_re = Vec::with_capacity(n);
        let mut out_im = im.map(|_| Vec::with_capacity(n));
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                let row = (k * e[1] + j) * e[0];
                for i in 0..dims[0] {
                    let c = buf[row + i];
                    out_re.push(c.re);
                    if let Some(o) = out_im.as_mut() {
                        o.push(c.im);
                    }
                }
            }
        }
        (out_re, out_im)
    }

    pub fn apply_planes(&self, planes: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(planes.len());
        for chunk in planes.chunks(2) {
            let (a, b) = self.smooth_pair(&chunk[0], chunk.get(1).map(|v| v.as_slice()));
            out.push(a);
            if let Some(b) = b {
                out.push(b);
            }
        }
        out
    }

    pub fn apply(&self, m: &VectorField) -> VectorField {
        debug_assert!(m.grid() == &self.grid);
        VectorField::from_parts(self.grid.clone(), self.apply_planes(m.components()))
    }

    pub fn apply_scalar(&self, f: &ScalarField) -> ScalarField {
        let (v, _) = self.smooth_pair(f.values(), None);
        ScalarField::from_parts(self.grid.clone(), v)
    }

    /// Direct separable convolution; same operator as the spectral route.
    pub fn apply_plane_spatial(&self, f: &[f64]) -> Vec<f64> {
        let grid = &self.grid;
        let dims = grid.dims3();
        let h = grid.spacing3();
        let strides = grid.strides();
        let mut acc = vec![0.0; f.len()];
        for comp in self.spec.components() {
            let mut cur = f.to_vec();
            for a in 0..grid.ndim() {
                let taps = gaussian_taps(comp.sigma, h[a]);
                let r = (taps.len() / 2) as i64;
                let n = dims[a];
                let s = strides[a];
                let mut next = vec![0.0; f.len()];
                for (p, out) in next.iter_mut().enumerate() {
                    let i = (p / s) % n;
                    let base = p - i * s;
                    let mut sum = 0.0;
                    for (k, t) in (-r..=r).zip(&taps) {
                        sum += t * cur[base + reflect(i as i64 + k, n) * s];
                    }
                    *out = sum;
                }
                cur = next;
            }
            for (x, c) in acc.iter_mut().zip(&cur) {
                *x += comp.weight * c;
            }
        }
        acc
    }

    pub fn apply_spatial(&self, m: &VectorField) -> VectorField {
        let comps = m
            .components()
            .iter()
            .map(|c| self.apply_plane_spatial(c))
            .collect();
        VectorField::from_parts(self.grid.clone(), comps)
    }
}

/// `v = K ⋆ m`.
pub fn smooth(m: &VectorField, k: &KernelSpec) -> VectorField {
    Smoother::new(m.grid(), k).apply(m)
}

/// Sum over points of `m · v`, times voxel volume.
pub fn inner_product(m: &VectorField, v: &VectorField) -> Result<f64> {
    m.grid().check_same(v.grid(), "inner product")?;
    Ok(planes_dot(m.components(), v.components()) * m.grid().voxel_volume())
}

pub(crate) fn planes_dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn random_field(grid: &GridSpec, seed: u64) -> VectorField {
        let comps = (0..grid.ndim())
            .map(|a| pseudo_random(grid.len(), seed + a as u64))
            .collect();
        VectorField::new(grid.clone(), comps).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::new(vec![]).is_err());
        assert!(KernelSpec::single(0.0).is_err());
        assert!(KernelSpec::new(vec![GaussianComponent { sigma: 1.0, weight: 0.5 }]).is_err());
        assert!(KernelSpec::new(vec![
            GaussianComponent { sigma: 1.0, weight: 1.5 },
            GaussianComponent { sigma: 2.0, weight: -0.5 },
        ])
        .is_err());
        let g = GridSpec::unit(&[64, 64]).unwrap();
        let k = KernelSpec::default_for_grid(&g);
        assert_eq!(k.components().len(), 3);
        assert!((k.components()[0].sigma - 3.15).abs() < 1e-12);
    }

    #[test]
    fn zero_and_constant() {
        let g = GridSpec::new(&[20, 13], &[1.0, 0.7], &[0.0, 0.0]).unwrap();
        let k = KernelSpec::equal_weights(&[1.0, 4.0, 9.0]).unwrap();
        let s = Smoother::new(&g, &k);
        let z = s.apply(&VectorField::zeros(g.clone()));
        assert!(z.max_abs() == 0.0);
        let c = VectorField::from_fn(g.clone(), |_| [2.0, -3.0, 0.0]);
        let out = s.apply(&c);
        assert!(out.component(0).iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert!(out.component(1).iter().all(|v| (v + 3.0).abs() < 1e-12));
    }

    #[test]
    fn impulse_matches_analytic_gaussian() {
        let n = 33;
        let g = GridSpec::unit(&[n, n]).unwrap();
        let sigma = 1.0;
        let c = n / 2;
        let mut plane = vec![0.0; g.len()];
        plane[g.flat_index([c, c, 0])] = 1.0;
        let m = VectorField::new(g.clone(), vec![plane.clone(), plane]).unwrap();
        let v = smooth(&m, &KernelSpec::single(sigma).unwrap());
        // Analytic oracle: exp(-x^2 / 2σ^2) over |x| <= 4σ, renormalized.
        let r = 4i64;
        let norm: f64 = (-r..=r).map(|k| (-(k * k) as f64 / 2.0).exp()).sum();
        let g1 = |k: i64| {
            if k.abs() > r {
                0.0
            } else {
                (-(k * k) as f64 / 2.0).exp() / norm
            }
        };
        for i in 0..g.len() {
            let idx = g.unflatten(i);
            let dx = idx[0] as i64 - c as i64;
            let dy = idx[1] as i64 - c as i64;
            let expected = g1(dx) * g1(dy);
            assert!((v.component(0)[i] - expected).abs() < 1e-6);
            assert!((v.component(1)[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn spectral_matches_spatial() {
        for (dims, spacing) in [
            (vec![17usize, 12], vec![1.0, 0.8]),
            (vec![9, 7, 6], vec![1.0, 1.5, 0.5]),
            (vec![5, 6], vec![1.0, 1.0]),
        ] {
            let g = GridSpec::new(&dims, &spacing, &vec![0.0; dims.len()]).unwrap();
            // Wide sigma forces multiple reflections on the small grid.
            let k = KernelSpec::equal_weights(&[0.6, 2.5, 7.0]).unwrap();
            let s = Smoother::new(&g, &k);
            let m = random_field(&g, 11);
            let a = s.apply(&m);
            let b = s.apply_spatial(&m);
            for (x, y) in a.components().iter().zip(b.components()) {
                for (p, q) in x.iter().zip(y) {
                    assert!((p - q).abs() < 1e-12, "{p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn self_adjoint_and_linear() {
        let g = GridSpec::new(&[24, 19], &[1.0, 1.3], &[0.0, 0.0]).unwrap();
        let k = KernelSpec::default_for_grid(&g);
        let s = Smoother::new(&g, &k);
        let a = random_field(&g, 1);
        let b = random_field(&g, 7);
        let lhs = inner_product(&s.apply(&a), &b).unwrap();
        let rhs = inner_product(&a, &s.apply(&b)).unwrap();
        assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()));

        let combo = a.scale(0.3).axpy(-1.7, &b).unwrap();
        let left = s.apply(&combo);
        let right = s.apply(&a).scale(0.3).axpy(-1.7, &s.apply(&b)).unwrap();
        let scale = right.max_abs();
        for (x, y) in left.components().iter().zip(right.components()) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn inner_product_cases() {
        let g = GridSpec::new(&[4, 4], &[2.0, 0.5], &[0.0, 0.0]).unwrap();
        let z = VectorField::zeros(g.clone());
        let a = random_field(&g, 3);
        assert_eq!(inner_product(&z, &a).unwrap(), 0.0);
        let mut p = vec![vec![0.0; 16], vec![0.0; 16]];
        let mut q = p.clone();
        p[0][5] = 3.0;
        p[1][5] = -2.0;
        q[0][5] = 1.5;
        q[1][5] = 4.0;
        let p = VectorField::new(g.clone(), p).unwrap();
        let q = VectorField::new(g.clone(), q).unwrap();
        assert!((inner_product(&p, &q).unwrap() - (3.0 * 1.5 - 2.0 * 4.0) * 1.0).abs() < 1e-15);
        let other = GridSpec::unit(&[4, 4]).unwrap();
        assert!(inner_product(&p, &VectorField::zeros(other)).is_err());
    }
}
