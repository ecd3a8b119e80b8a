//! Initial-momentum registration: minimizes
//! `½⟨m0, K m0⟩ + w · Sim(I0 ∘ φ⁻¹(1), I1)` by steepest descent with
//! backtracking, coarse to fine. The gradient is the exact adjoint of the
//! discrete forward integrator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{identity_map, DeformationMap, GridSpec, Interpolate, ScalarField, VectorField};
use crate::kernel::{planes_dot, GaussianComponent, KernelSpec, Smoother};
use crate::shooting::{inverse_adjoint, shoot_inverse, InverseTape, Integrator, Planes, ShootConfig};
use crate::subspace::{MomentumProvenance, MomentumSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Similarity {
    /// Sum of squared differences times voxel volume.
    Ssd,
    /// `Σ (1 - ncc²)` over cubic windows of `window` voxels per side.
    Lncc { window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Total iteration budget over all levels.
    pub max_iters: usize,
    /// Initial step length at each level.
    pub step_size: f64,
    /// Backtracking factor applied on rejection, in (0, 1).
    pub shrink: f64,
    /// Step growth after an accepted step, >= 1.
    pub growth: f64,
    /// Stop when the L2 gradient norm falls below this.
    pub grad_tol: f64,
    pub max_backtracks: usize,
    /// Descend along `K' g` instead of `g`, which keeps every iterate smooth.
    pub smooth_direction: bool,
    /// `K'` is the model kernel with every sigma scaled by this factor.
    /// Values below 1 let fine-scale corrections converge faster.
    pub direction_sigma_scale: f64,
    /// Start each line search from the Barzilai-Borwein step length.
    pub barzilai_borwein: bool,
    /// Width of a smooth window, as a fraction of the grid extent, that
    /// fades the descent direction to zero at the domain boundary. Keeps
    /// momentum off the border, where inflow makes the transport unstable.
    /// 0 disables it.
    pub boundary_taper: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 150,
            step_size: 2.0,
            shrink: 0.5,
            growth: 1.5,
            grad_tol: 1e-5,
            max_backtracks: 25,
            smooth_direction: true,
            direction_sigma_scale: 0.25,
            barzilai_borwein: true,
            boundary_taper: 0.075,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleLevel {
    pub factor: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub similarity: Similarity,
    pub sim_weight: f64,
    pub shoot: ShootConfig,
    pub optimizer: OptimizerConfig,
    /// Coarse to fine.
    pub multiscale: Vec<ScaleLevel>,
}

impl RegConfig {
    /// SSD, weight 2000, levels 4/2/1 with 60/60/30 iterations.
    pub fn default_for_grid(grid: &GridSpec) -> Self {
        RegConfig {
            similarity: Similarity::Ssd,
            sim_weight: 2000.0,
            shoot: ShootConfig::default_for_grid(grid),
            optimizer: OptimizerConfig::default(),
            multiscale: vec![
                ScaleLevel { factor: 4, iters: 60 },
                ScaleLevel { factor: 2, iters: 60 },
                ScaleLevel { factor: 1, iters: 30 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shoot.validate()?;
        if !(self.sim_weight > 0.0 && self.sim_weight.is_finite()) {
            return Err(Error::InvalidConfig("sim_weight must be positive".into()));
        }
        let o = &self.optimizer;
        if o.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(o.direction_sigma_scale > 0.0 && o.direction_sigma_scale.is_finite()) {
            return Err(Error::InvalidConfig("direction_sigma_scale must be positive".into()));
        }
        if !(o.boundary_taper >= 0.0 && o.boundary_taper < 0.5) {
            return Err(Error::InvalidConfig("boundary_taper must be in [0, 0.5)".into()));
        }
        if !(o.step_size > 0.0) || !(o.shrink > 0.0 && o.shrink < 1.0) || !(o.growth >= 1.0) {
            return Err(Error::InvalidConfig("step_size > 0, 0 < shrink < 1 and growth >= 1 required".into()));
        }
        if !(o.grad_tol >= 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be nonnegative".into()));
        }
        if self.multiscale.is_empty() {
            return Err(Error::InvalidConfig("at least one scale level required".into()));
        }
        if self.multiscale.iter().any(|l| l.factor < 1) {
            return Err(Error::InvalidConfig("scale factors must be positive".into()));
        }
        if self.multiscale.windows(2).any(|w| w[0].factor <= w[1].factor) {
            return Err(Error::InvalidConfig("scale factors must be strictly descending".into()));
        }
        if let Similarity::Lncc { window } = self.similarity {
            if window < 1 {
                return Err(Error::InvalidConfig("lncc window must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Stable fingerprint of the configuration, used as a cache key.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub total: f64,
    pub regularity: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub iteration: usize,
    pub regularity: f64,
    pub similarity: f64,
}

impl TraceEntry {
    pub fn total(&self) -> f64 {
        self.regularity + self.similarity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchStalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub reason: StopReason,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct RegResult {
    pub m0: VectorField,
    /// Accepted iterates per level; energies are comparable only within a level.
    pub energy_trace: Vec<TraceEntry>,
    pub final_warped: ScalarField,
    pub final_energy: EnergyTerms,
    pub initial_similarity: f64,
    pub converged: Convergence,
}

/// Registration objective on one grid.
struct Objective {
    integ: Integrator,
    source: ScalarField,
    target: ScalarField,
    similarity: Similarity,
    sim_weight: f64,
    steps: usize,
    /// Direction smoother when it differs from the model kernel.
    direction_kernel: Option<Smoother>,
    smooth_direction: bool,
    taper: Option<Vec<f64>>,
}

struct Evaluation {
    terms: EnergyTerms,
    v0: Planes,
    psi: Planes,
    warped: Vec<f64>,
    tape: Option<InverseTape>,
}

impl Objective {
    fn new(source: ScalarField, target: ScalarField, cfg: &RegConfig) -> Self {
        let integ = Integrator::new(source.grid(), &cfg.shoot.kernel);
        let scale = cfg.optimizer.direction_sigma_scale;
        let direction_kernel = (cfg.optimizer.smooth_direction && scale != 1.0).then(|| {
            let components = cfg
                .shoot
                .kernel
                .components()
                .iter()
                .map(|c| GaussianComponent { sigma: c.sigma * scale, weight: c.weight })
                .collect();
            KernelSpec::new(components).ok().map(|k| Smoother::new(source.grid(), &k))
        }).flatten();
        Objective {
            direction_kernel,
            smooth_direction: cfg.optimizer.smooth_direction,
            taper: boundary_window(source.grid(), cfg.optimizer.boundary_taper),
            integ,
            source,
            target,
            similarity: cfg.similarity,
            sim_weight: cfg.sim_weight,
            steps: cfg.shoot.steps_per_unit_time,
        }
    }

    fn grid(&self) -> &GridSpec {
        self.source.grid()
    }

    /// `W S W g` with `S` the kernel or the identity and `W` the boundary
    /// window; symmetric positive semidefinite, so always a descent direction.
    fn direction(&self, grad: &Planes) -> Planes {
        let window = |p: &Planes| -> Planes {
            match &self.taper {
                Some(w) => p.iter().map(|c| c.iter().zip(w).map(|(x, w)| x * w).collect()).collect(),
                None => p.clone(),
            }
        };
        let d = window(grad);
        let d = match (&self.direction_kernel, self.smooth_direction) {
            (Some(k), _) => k.apply_planes(&d),
            (None, true) => self.integ.smooth(&d),
            (None, false) => d,
        };
        window(&d)
    }

    fn evaluate(&self, m: &Planes, record: bool) -> Result<Evaluation> {
        let vol = self.grid().voxel_volume();
        let v0 = self.integ.smooth(m);
        let regularity = 0.5 * vol * planes_dot(m, &v0);
        let (psi, tape) = shoot_inverse(&self.integ, m, 1.0, self.steps, record)?;
        let map = DeformationMap::from_parts(self.grid().clone(), psi);
        let warped = self.source.interpolate(&map)?.into_values();
        let similarity = self.sim_weight * vol * self.similarity_sum(&warped);
        Ok(Evaluation {
            terms: EnergyTerms {
                total: regularity + similarity,
                regularity,
                similarity,
            },
            v0,
            psi: map.into_coords(),
            warped,
            tape,
        })
    }

    fn similarity_sum(&self, warped: &[f64]) -> f64 {
        match self.similarity {
            Similarity::Ssd => warped
                .iter()
                .zip(self.target.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum(),
            Similarity::Lncc { window } => lncc(self.grid(), warped, self.target.values(), window / 2).0,
        }
    }

    /// L2 (inner-product) gradient from a recorded evaluation.
    fn gradient(&self, eval: &Evaluation) -> Planes {
        let g = self.grid();
        let vol = g.voxel_volume();
        let d = g.ndim();
        let scale = self.sim_weight * vol;
        // Cotangent of the warped image.
        let residual_bar: Vec<f64> = match self.similarity {
            Similarity::Ssd => eval
                .warped
                .iter()
                .zip(self.target.values())
                .map(|(a, b)| 2.0 * scale * (a - b))
                .collect(),
            Similarity::Lncc { window } => {
                let (_, grad) = lncc(g, &eval.warped, self.target.values(), window / 2);
                grad.into_iter().map(|x| scale * x).collect()
            }
        };
        let mut psi_bar = vec![vec![0.0; g.len()]; d];
        for p in 0..g.len() {
            let r = residual_bar[p];
            if r == 0.0 {
                continue;
            }
            let q: [f64; 3] = std::array::from_fn(|a| if a < d { eval.psi[a][p] } else { 0.0 });
            let gr = g.stencil(q).sample_grad(self.source.values());
            for a in 0..d {
                psi_bar[a][p] = r * gr[a];
            }
        }
        let tape = eval.tape.as_ref().expect("gradient needs a recorded evaluation");
        let m_bar = inverse_adjoint(&self.integ, tape, psi_bar);
        eval.v0
            .iter()
            .zip(&m_bar)
            .map(|(v, b)| v.iter().zip(b).map(|(x, y)| x + y / vol).collect())
            .collect()
    }
}

fn boundary_window(grid: &GridSpec, fraction: f64) -> Option<Vec<f64>> {
    if fraction <= 0.0 {
        return None;
    }
    let width = fraction * grid.extent();
    let d = grid.ndim();
    let dims = grid.dims();
    let h = grid.spacing();
    let ramp = |dist: f64| {
        let s = (dist / width).min(1.0);
        (0.5 * std::f64::consts::PI * s).sin().powi(2)
    };
    Some(
        (0..grid.len())
            .map(|p| {
                let idx = grid.unflatten(p);
                (0..d)
                    .map(|a| {
                        let lo = idx[a] as f64 * h[a];
                        let hi = (dims[a] - 1 - idx[a]) as f64 * h[a];
                        ramp(lo.min(hi))
                    })
                    .product()
            })
            .collect(),
    )
}

/// Box sums over a `(2r+1)`-wide window clipped to the domain; symmetric.
fn box_sum(grid: &GridSpec, f: &[f64], r: usize) -> Vec<f64> {
    let dims = grid.dims3();
    let strides = grid.strides();
    let mut cur = f.to_vec();
    for a in 0..grid.ndim() {
        let n = dims[a];
        let s = strides[a];
        let mut next = vec![0.0; f.len()];
        let mut prefix = vec![0.0; n + 1];
        for start in 0..f.len() {
            if (start / s) % n != 0 {
                continue;
            }
            for i in 0..n {
                prefix[i + 1] = prefix[i] + cur[start + i * s];
            }
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(n);
                next[start + i * s] = prefix[hi] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

const LNCC_EPS: f64 = 1e-5;

/// Returns `Σ (1 - cc)` and its gradient with respect to `a`.
fn lncc(grid: &GridSpec, a: &[f64], b: &[f64], r: usize) -> (f64, Vec<f64>) {
    let n = a.len();
    let ones = vec![1.0; n];
    let count = box_sum(grid, &ones, r);
    let mean = |f: &[f64]| -> Vec<f64> { box_sum(grid, f, r).iter().zip(&count).map(|(s, c)| s / c).collect() };
    let aa_in: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb_in: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab_in: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let ma = mean(a);
    let mb = mean(b);
    let maa = mean(&aa_in);
    let mbb = mean(&bb_in);
    let mab = mean(&ab_in);

    let mut value = 0.0;
    let mut ma_bar = vec![0.0; n];
    let mut maa_bar = vec![0.0; n];
    let mut mab_bar = vec![0.0; n];
    for p in 0..n {
        let var_a = maa[p] - ma[p] * ma[p];
        let var_b = mbb[p] - mb[p] * mb[p];
        let cov = mab[p] - ma[p] * mb[p];
        let den = var_a * var_b + LNCC_EPS;
        let cc = cov * cov / den;
        value += 1.0 - cc;
        // d(1 - cc)
        let cov_bar = -2.0 * cov / den;
        let var_a_bar = cov * cov / (den * den) * var_b;
        maa_bar[p] = var_a_bar;
        mab_bar[p] = cov_bar;
        ma_bar[p] = -2.0 * ma[p] * var_a_bar - mb[p] * cov_bar;
    }
    // mean = S(f) / count, so mean^T(x) = S(x / count).
    let back = |x: &[f64]| -> Vec<f64> {
        let scaled: Vec<f64> = x.iter().zip(&count).map(|(v, c)| v / c).collect();
        box_sum(grid, &scaled, r)
    };
    let ga = back(&ma_bar);
    let gaa = back(&maa_bar);
    let gab = back(&mab_bar);
    let grad = (0..n).map(|p| ga[p] + 2.0 * a[p] * gaa[p] + b[p] * gab[p]).collect();
    (value, grad)
}

fn check_pair(i0: &ScalarField, i1: &ScalarField) -> Result<()> {
    i0.grid().check_same(i1.grid(), "source/target")
}

fn check_momentum(m0: &VectorField, i0: &ScalarField) -> Result<()> {
    m0.grid().check_same(i0.grid(), "momentum/image")?;
    if !m0.is_finite() {
        return Err(Error::NonFinite("momentum"));
    }
    Ok(())
}

/// Energy terms at full resolution.
pub fn energy(m0: &VectorField, i0: &ScalarField, i1: &ScalarField, cfg: &RegConfig) -> Result<EnergyTerms> {
    check_pair(i0, i1)?;
    check_momentum(m0, i0)?;
    let obj = Objective::new(i0.clone(), i1.clone(), cfg);
    Ok(obj.evaluate(&m0.components().to_vec(), false)?.terms)
}

/// Gradient of [`energy`] with respect to `m0`, as the representer under
/// [`crate::kernel::inner_product`]: `dE = ⟨g, δm⟩`.
pub fn energy_gradient(m0: &VectorField, i0: &ScalarField, i1: &ScalarField, cfg: &RegConfig) -> Result<VectorField> {
    check_pair(i0, i1)?;
    check_momentum(m0, i0)?;
    let obj = Objective::new(i0.clone(), i1.clone(), cfg);
    let eval = obj.evaluate(&m0.components().to_vec(), true)?;
    Ok(VectorField::from_parts(i0.grid().clone(), obj.gradient(&eval)))
}

/// Gaussian pre-smoothing followed by multilinear resampling onto `coarse`.
fn downsample(image: &ScalarField, coarse: &GridSpec, factor: usize) -> Result<ScalarField> {
    if coarse == image.grid() {
        return Ok(image.clone());
    }
    let sigma = 0.5 * factor as f64 * image.grid().min_spacing();
    let smoothed = Smoother::new(image.grid(), &KernelSpec::single(sigma)?).apply_scalar(image);
    smoothed.interpolate(&identity_map(coarse))
}

fn resample_momentum(m: &VectorField, grid: &GridSpec) -> Result<VectorField> {
    if m.grid() == grid {
        return Ok(m.clone());
    }
    // Momentum is a density against the normalized kernel, so resampling
    // preserves the induced velocity without extra scaling.
    m.interpolate(&identity_map(grid))
}

fn l2_norm(g: &Planes, vol: f64) -> f64 {
    (planes_dot(g, g) * vol).sqrt()
}

/// Registers `i0` (source) onto `i1` (target).
pub fn register(i0: &ScalarField, i1: &ScalarField, cfg: &RegConfig) -> Result<RegResult> {
    cfg.validate()?;
    check_pair(i0, i1)?;
    let full = i0.grid().clone();
    let opt = &cfg.optimizer;
    let mut m = VectorField::zeros(full.clone());
    let mut trace = Vec::new();
    let mut total_iters = 0usize;
    let mut stop = StopReason::MaxIterations;
    let mut initial_similarity = None;

    for (level, lv) in cfg.multiscale.iter().enumerate() {
        let grid = full.coarsened(lv.factor);
        let src = downsample(i0, &grid, lv.factor)?;
        let tgt = downsample(i1, &grid, lv.factor)?;
        let obj = Objective::new(src, tgt, cfg);
        let vol = grid.voxel_volume();
        let mut cur = resample_momentum(&m, &grid)?.into_components();

        let mut eval = obj.evaluate(&cur, true)?;
        if !eval.terms.total.is_finite() {
            return Err(Error::NonFiniteEnergy { level, iteration: 0 });
        }
        trace.push(TraceEntry {
            level,
            iteration: 0,
            regularity: eval.terms.regularity,
            similarity: eval.terms.similarity,
        });
        let mut grad = obj.gradient(&eval);
        let mut step = opt.step_size;
        let mut last: Option<(f64, Planes)> = None;
        stop = StopReason::MaxIterations;
        for it in 1..=lv.iters {
            if total_iters >= opt.max_iters {
                break;
            }
            let gnorm = l2_norm(&grad, vol);
            if gnorm < opt.grad_tol {
                stop = StopReason::GradientTolerance;
                break;
            }
            let dir = obj.direction(&grad);
            let slope = planes_dot(&grad, &dir) * vol;
            if opt.barzilai_borwein {
                if let Some((taken, prev)) = &last {
                    // s = -taken * prev, y = dir - prev
                    let y: Planes = dir.iter().zip(prev).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
                    let sy = -taken * planes_dot(prev, &y);
                    let ss = taken * taken * planes_dot(prev, prev);
                    if sy > 0.0 && (ss / sy).is_finite() {
                        step = ss / sy;
                    }
                }
            }
            let mut accepted = None;
            for _ in 0..opt.max_backtracks {
                let trial: Planes = cur
                    .iter()
                    .zip(&dir)
                    .map(|(m, g)| m.iter().zip(g).map(|(x, y)| x - step * y).collect())
                    .collect();
                // Blow-up on a trial step just means the step was too long.
                if let Ok(e) = obj.evaluate(&trial, true) {
                    if e.terms.total.is_finite() && e.terms.total < eval.terms.total - 1e-4 * step * slope {
                        accepted = Some((trial, e));
                        break;
                    }
                }
                step *= opt.shrink;
            }
            let Some((trial, e)) = accepted else {
                stop = StopReason::LineSearchStalled;
                break;
            };
            cur = trial;
            eval = e;
            last = Some((step, dir));
            step *= opt.growth;
            total_iters += 1;
            trace.push(TraceEntry {
                level,
                iteration: it,
                regularity: eval.terms.regularity,
                similarity: eval.terms.similarity,
            });
            grad = obj.gradient(&eval);
        }
        if initial_similarity.is_none() && lv.factor == 1 {
            initial_similarity = Some(obj.similarity_at_zero()?);
        }
        m = VectorField::from_parts(grid, cur);
    }

    let m0 = resample_momentum(&m, &full)?;
    let obj = Objective::new(i0.clone(), i1.clone(), cfg);
    let eval = obj.evaluate(&m0.components().to_vec(), false)?;
    let initial_similarity = match initial_similarity {
        Some(s) => s,
        None => obj.similarity_at_zero()?,
    };
    Ok(RegResult {
        m0,
        energy_trace: trace,
        final_warped: ScalarField::from_parts(full, eval.warped),
        final_energy: eval.terms,
        initial_similarity,
        converged: Convergence {
            converged: stop == StopReason::GradientTolerance,
            reason: stop,
            iterations: total_iters,
        },
    })
}

impl Objective {
    fn similarity_at_zero(&self) -> Result<f64> {
        Ok(self.sim_weight * self.grid().voxel_volume() * self.similarity_sum(self.source.values()))
    }
}

/// Registers `source` to every target; one momentum per target.
pub fn build_momentum_set(
    source_id: &str,
    source: &ScalarField,
    targets: &[(String, ScalarField)],
    cfg: &RegConfig,
) -> Result<MomentumSet> {
    if targets.is_empty() {
        return Err(Error::Empty("target list"));
    }
    let results: Vec<Result<RegResult>> = targets.par_iter().map(|(_, t)| register(source, t, cfg)).collect();
    let mut momenta = Vec::with_capacity(targets.len());
    let mut provenance = Vec::with_capacity(targets.len());
    for (index, (res, (id, _))) in results.into_iter().zip(targets).enumerate() {
        let r = res.map_err(|e| Error::Registration { index, source: Box::new(e) })?;
        provenance.push(MomentumProvenance::from_result(id, &r));
        momenta.push(r.m0);
    }
    MomentumSet::new(source_id.to_string(), momenta, provenance)
}
