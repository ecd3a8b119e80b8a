//! Deterministic synthetic labeled scenes: soft-edged ellipses, annuli and
//! lobed blobs, with optional additive noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::LabelMap;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField};
use crate::subspace::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ShapeKind {
    Ellipse,
    /// Ellipse minus a concentric hole whose radii are `inner` times the outer.
    Annulus { inner: f64 },
    /// Ellipse whose radius is modulated by `1 + amplitude cos(lobes θ + phase)`
    /// in the x-y plane.
    Blob { lobes: u32, amplitude: f64, phase: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub kind: ShapeKind,
    /// mm
    pub center: Vec<f64>,
    /// mm
    pub radii: Vec<f64>,
    pub label: u16,
    pub intensity: f64,
    /// Soft-edge width in mm.
    pub edge: f64,
}

impl Shape {
    /// Approximate signed distance in mm, negative inside.
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let d = self.center.len();
        let rmin = self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        let mut q = [0.0; 3];
        for a in 0..d {
            q[a] = (p[a] - self.center[a]) / self.radii[a];
        }
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        match self.kind {
            ShapeKind::Ellipse => (rho - 1.0) * rmin,
            ShapeKind::Annulus { inner } => {
                let outer = (rho - 1.0) * rmin;
                let hole = (rho / inner - 1.0) * rmin * inner;
                outer.max(-hole)
            }
            ShapeKind::Blob { lobes, amplitude, phase } => {
                let theta = q[1].atan2(q[0]);
                let scale = 1.0 + amplitude * (lobes as f64 * theta + phase).cos();
                (rho / scale - 1.0) * rmin * scale
            }
        }
    }

    /// Largest extent from the center along each axis.
    fn reach(&self) -> Vec<f64> {
        let s = match self.kind {
            ShapeKind::Blob { amplitude, .. } => 1.0 + amplitude.abs(),
            _ => 1.0,
        };
        self.radii.iter().map(|r| r * s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSceneSpec {
    pub grid: GridSpec,
    /// Later shapes paint over earlier ones.
    pub shapes: Vec<Shape>,
    /// Standard deviation of additive Gaussian noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ShapeSceneSpec {
    /// Three nested structures (body, ring, lobed blob) filling a square grid
    /// of `n` unit-spaced points per axis.
    pub fn default_2d(n: usize) -> Result<Self> {
        let grid = GridSpec::unit(&[n, n])?;
        let s = n as f64 / 64.0;
        let c = (n - 1) as f64 / 2.0;
        let edge = 2.0;
        let shapes = vec![
            Shape {
                kind: ShapeKind::Ellipse,
                center: vec![c, c],
                radii: vec![20.0 * s, 16.0 * s],
                label: 1,
                intensity: 0.35,
                edge,
            },
            Shape {
                kind: ShapeKind::Annulus { inner: 0.55 },
                center: vec![c - 4.0 * s, c + 2.0 * s],
                radii: vec![11.0 * s, 9.0 * s],
                label: 2,
                intensity: 0.7,
                edge,
            },
            Shape {
                kind: ShapeKind::Blob { lobes: 3, amplitude: 0.2, phase: 0.3 },
                center: vec![c + 10.0 * s, c - 6.0 * s],
                radii: vec![5.0 * s, 5.0 * s],
                label: 3,
                intensity: 1.0,
                edge,
            },
        ];
        Ok(ShapeSceneSpec { grid, shapes, noise: 0.0, rng_seed: 0 })
    }

    pub fn label_count(&self) -> usize {
        self.shapes.iter().map(|s| s.label as usize).max().unwrap_or(0) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let d = g.ndim();
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidScene("noise must be a nonnegative number".into()));
        }
        let mut used = vec![false; self.label_count()];
        for (k, s) in self.shapes.iter().enumerate() {
            if s.center.len() != d || s.radii.len() != d {
                return Err(Error::InvalidScene(format!("shape {k}: center and radii need {d} entries")));
            }
            if s.radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) || !(s.edge > 0.0) {
                return Err(Error::InvalidScene(format!("shape {k}: radii and edge must be positive")));
            }
            if !(0.0..=1.0).contains(&s.intensity) {
                return Err(Error::InvalidScene(format!("shape {k}: intensity outside [0, 1]")));
            }
            if s.label == 0 {
                return Err(Error::InvalidScene(format!("shape {k}: label 0 is background")));
            }
            match s.kind {
                ShapeKind::Annulus { inner } if !(inner > 0.0 && inner < 1.0) => {
                    return Err(Error::InvalidScene(format!("shape {k}: annulus inner ratio must be in (0, 1)")));
                }
                ShapeKind::Blob { amplitude, .. } if !(amplitude.abs() < 1.0) => {
                    return Err(Error::InvalidScene(format!("shape {k}: blob amplitude must be below 1")));
                }
                _ => {}
            }
            for (a, r) in s.reach().into_iter().enumerate() {
                let lo = g.origin()[a] + s.edge;
                let hi = g.origin()[a] + (g.dims()[a] - 1) as f64 * g.spacing()[a] - s.edge;
                if s.center[a] - r < lo || s.center[a] + r > hi {
                    return Err(Error::InvalidScene(format!("shape {k} leaves the domain margin on axis {a}")));
                }
            }
            used[s.label as usize] = true;
        }
        if used.iter().skip(1).any(|u| !u) {
            return Err(Error::InvalidScene("label ids must be dense from 1".into()));
        }
        Ok(())
    }
}

/// Renders a scene: smooth intensities and containment labels.
pub fn generate_scene(spec: &ShapeSceneSpec) -> Result<(ScalarField, LabelMap)> {
    spec.validate()?;
    let g = &spec.grid;
    let mut image = vec![0.0; g.len()];
    let mut labels = vec![0u16; g.len()];
    for (i, (v, l)) in image.iter_mut().zip(labels.iter_mut()).enumerate() {
        let p = g.position(i);
        for s in &spec.shapes {
            let sd = s.signed_distance(p);
            let cover = 0.5 * (1.0 - (2.0 * sd / s.edge).tanh());
            *v = *v * (1.0 - cover) + s.intensity * cover;
            if sd < 0.0 {
                *l = s.label;
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidScene(e.to_string()))?;
        let mut rng = stream_rng(spec.rng_seed, 0);
        let hi = 1.0 + 3.0 * spec.noise;
        for v in &mut image {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, hi);
        }
    }
    Ok((ScalarField::new(g.clone(), image)?, LabelMap::new(g.clone(), labels, spec.label_count())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationScales {
    /// Max center shift per axis, mm.
    pub center: f64,
    /// Max relative radius change.
    pub radius: f64,
    /// Max intensity change.
    pub intensity: f64,
}

impl Default for PerturbationScales {
    fn default() -> Self {
        PerturbationScales { center: 2.5, radius: 0.12, intensity: 0.05 }
    }
}

const MAX_RETRIES: usize = 100;

fn perturb<R: Rng + ?Sized>(base: &ShapeSceneSpec, scales: &PerturbationScales, rng: &mut R) -> ShapeSceneSpec {
    let mut u = |s: f64| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
    let mut spec = base.clone();
    for shape in &mut spec.shapes {
        for c in &mut shape.center {
            *c += u(scales.center);
        }
        for r in &mut shape.radii {
            *r *= 1.0 + u(scales.radius);
        }
        shape.intensity = (shape.intensity + u(scales.intensity)).clamp(0.0, 1.0);
    }
    spec
}

/// `n` scenes; index 0 is `base`, the rest are random perturbations of it.
/// Scene `i` draws from RNG stream `i` of `rng_seed` and its noise from seed
/// `base.rng_seed + i`.
pub fn generate_population(
    base: &ShapeSceneSpec,
    n: usize,
    scales: &PerturbationScales,
    rng_seed: u64,
) -> Result<Vec<(ScalarField, LabelMap)>> {
    if n < 1 {
        return Err(Error::InvalidConfig("population size must be >= 1".into()));
    }
    base.validate()?;
    (0..n)
        .map(|i| {
            if i == 0 {
                return generate_scene(base);
            }
            let mut rng = stream_rng(rng_seed, i as u64);
            for _ in 0..MAX_RETRIES {
                let mut spec = perturb(base, scales, &mut rng);
                spec.rng_seed = base.rng_seed.wrapping_add(i as u64);
                if spec.validate().is_ok() {
                    return generate_scene(&spec);
                }
            }
            Err(Error::InvalidScene(format!("scene {i}: no valid perturbation in {MAX_RETRIES} draws")))
        })
        .collect()
}
