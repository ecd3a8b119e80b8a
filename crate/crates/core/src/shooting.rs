//! Geodesic shooting: EPDiff integration of the momentum together with the
//! inverse map (semi-Lagrangian) and the forward map (particle RK4).
//!
//! One step of size `dt` from momentum `m`:
//!
//! ```text
//! s1 = m                  v_i = K s_i,  k_i = rhs(s_i, v_i)
//! s2 = m + dt/2 k1
//! s3 = m + dt/2 k2
//! s4 = m + dt k3
//! m' = m + dt/6 (k1 + 2 k2 + 2 k3 + k4)
//! ```
//!
//! The forward map is RK4 particle advection through `v1..v4`. The inverse
//! map at time `t` is the foot of the characteristic through each grid point:
//! the particle is traced from `t` back to 0 with the same stages in reverse
//! (`v4, v3, v2, v1`). Only velocities are ever interpolated, so the maps do
//! not lose accuracy as steps accumulate.
//!
//! The momentum integration and the backward trace have an exact discrete
//! adjoint, which the registration gradient uses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{diff, diff_axis, diff_axis_adjoint_add, identity_map, DeformationMap, GridSpec, VectorField};
use crate::kernel::{KernelSpec, Smoother};

pub(crate) type Planes = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootConfig {
    pub steps_per_unit_time: usize,
    pub kernel: KernelSpec,
}

impl ShootConfig {
    pub fn new(steps_per_unit_time: usize, kernel: KernelSpec) -> Result<Self> {
        let cfg = ShootConfig { steps_per_unit_time, kernel };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default step count (20 per unit time) with the grid-relative default kernel.
    pub fn default_for_grid(grid: &GridSpec) -> Self {
        ShootConfig {
            steps_per_unit_time: 20,
            kernel: KernelSpec::default_for_grid(grid),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_unit_time < 1 {
            return Err(Error::InvalidConfig("steps_per_unit_time must be >= 1".into()));
        }
        Ok(())
    }
}

/// State of the geodesic at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicState {
    pub t: f64,
    pub m: VectorField,
    pub v: VectorField,
    pub phi_inv: DeformationMap,
    pub phi: DeformationMap,
}

/// Step schedule for reaching `t`: `(n, dt)` with `n * dt == t`.
///
/// When `|t| * steps` is an integer the step is exactly `±1/steps`, so runs
/// to different times share one step grid.
pub(crate) fn schedule(t: f64, steps_per_unit_time: usize) -> (usize, f64) {
    let q = t.abs() * steps_per_unit_time as f64;
    let rounded = q.round();
    if (q - rounded).abs() < 1e-9 && rounded >= 1.0 {
        (rounded as usize, t.signum() / steps_per_unit_time as f64)
    } else {
        let n = (q.ceil() as usize).max(1);
        (n, t / n as f64)
    }
}

/// Intermediate RK4 stage states of one momentum step.
#[derive(Debug, Clone)]
pub(crate) struct Stages {
    pub s: [Planes; 4],
    pub v: [Planes; 4],
}

#[derive(Debug)]
pub(crate) struct Integrator {
    grid: GridSpec,
    smoother: Smoother,
    positions: Planes,
}

fn axpy_planes(x: &Planes, s: f64, y: &Planes) -> Planes {
    x.iter()
        .zip(y)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + s * q).collect())
        .collect()
}

fn add_scaled(acc: &mut Planes, s: f64, y: &Planes) {
    for (a, b) in acc.iter_mut().zip(y) {
        for (p, q) in a.iter_mut().zip(b) {
            *p += s * q;
        }
    }
}

fn planes_finite(p: &Planes) -> bool {
    p.iter().all(|c| c.iter().all(|x| x.is_finite()))
}

impl Integrator {
    pub fn new(grid: &GridSpec, kernel: &KernelSpec) -> Self {
        Integrator {
            grid: grid.clone(),
            smoother: Smoother::new(grid, kernel),
            positions: identity_map(grid).into_coords(),
        }
    }

    pub fn smooth(&self, m: &Planes) -> Planes {
        self.smoother.apply_planes(m)
    }

    fn zeros(&self) -> Planes {
        vec![vec![0.0; self.grid.len()]; self.grid.ndim()]
    }

    /// `-(div(v) m + (Dv)^T m + (Dm) v)`, evaluated in the conservative form
    /// `-(sum_j D_j(m_i v_j) + sum_j m_j D_i v_j)`. Where the difference
    /// operator is skew-adjoint this conserves `<m, K m>` exactly.
    pub fn rhs(&self, m: &Planes, v: &Planes) -> Planes {
        let g = &self.grid;
        let d = g.ndim();
        let n = g.len();
        let mut out = self.zeros();
        let mut prod = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        // dv[j][i] = D_i v_j
        let dv: Vec<Vec<Vec<f64>>> = (0..d).map(|j| (0..d).map(|i| diff(g, &v[j], i)).collect()).collect();
        for i in 0..d {
            let o = &mut out[i];
            for j in 0..d {
                for p in 0..n {
                    prod[p] = m[i][p] * v[j][p];
                }
                diff_axis(g, &prod, j, &mut tmp);
                for p in 0..n {
                    o[p] -= tmp[p] + m[j][p] * dv[j][i][p];
                }
            }
        }
        out
    }

    /// Transpose Jacobian of `F(m) = rhs(m, K m)` applied to `lam`, plus
    /// `K v_extra` for a cotangent arriving directly on `v`.
    pub fn rhs_vjp(&self, m: &Planes, v: &Planes, lam: &Planes, v_extra: &Planes) -> Planes {
        let g = &self.grid;
        let d = g.ndim();
        let n = g.len();
        let mut gm = self.zeros();
        let mut gv = v_extra.clone();
        let mut tmp = vec![0.0; n];
        let mut prod = vec![0.0; n];
        for i in 0..d {
            for j in 0..d {
                // <lam_i, D_j(m_i v_j)> = <D_j^T lam_i, m_i v_j>
                tmp.iter_mut().for_each(|x| *x = 0.0);
                diff_axis_adjoint_add(g, &lam[i], j, &mut tmp);
                for p in 0..n {
                    gm[i][p] -= tmp[p] * v[j][p];
                    gv[j][p] -= tmp[p] * m[i][p];
                }
                // <lam_i, m_j D_i v_j>
                let dvji = diff(g, &v[j], i);
                for p in 0..n {
                    gm[j][p] -= lam[i][p] * dvji[p];
                    prod[p] = lam[i][p] * m[j][p];
                }
                tmp.iter_mut().for_each(|x| *x = 0.0);
                diff_axis_adjoint_add(g, &prod, i, &mut tmp);
                for p in 0..n {
                    gv[j][p] -= tmp[p];
                }
            }
        }
        let kgv = self.smooth(&gv);
        add_scaled(&mut gm, 1.0, &kgv);
        gm
    }

    /// RK4 momentum step; returns the new momentum and the stages.
    pub fn momentum_step(&self, m: &Planes, dt: f64) -> (Planes, Stages) {
        let s1 = m.clone();
        let v1 = self.smooth(&s1);
        let k1 = self.rhs(&s1, &v1);
        let s2 = axpy_planes(m, 0.5 * dt, &k1);
        let v2 = self.smooth(&s2);
        let k2 = self.rhs(&s2, &v2);
        let s3 = axpy_planes(m, 0.5 * dt, &k2);
        let v3 = self.smooth(&s3);
        let k3 = self.rhs(&s3, &v3);
        let s4 = axpy_planes(m, dt, &k3);
        let v4 = self.smooth(&s4);
        let k4 = self.rhs(&s4, &v4);
        let mut next = m.clone();
        add_scaled(&mut next, dt / 6.0, &k1);
        add_scaled(&mut next, dt / 3.0, &k2);
        add_scaled(&mut next, dt / 3.0, &k3);
        add_scaled(&mut next, dt / 6.0, &k4);
        (
            next,
            Stages {
                s: [s1, s2, s3, s4],
                v: [v1, v2, v3, v4],
            },
        )
    }

    /// RK4 particle advection of the forward map through the stage velocities.
    pub fn advect_forward(&self, phi: &Planes, v: &[Planes; 4], dt: f64) -> Planes {
        let d = self.grid.ndim();
        let g = &self.grid;
        let mut out = self.zeros();
        let sample = |vel: &Planes, p: [f64; 3]| {
            let st = g.stencil(p);
            let mut r = [0.0; 3];
            for a in 0..d {
                r[a] = st.sample(&vel[a]);
            }
            r
        };
        for i in 0..g.len() {
            let mut p = [0.0; 3];
            for a in 0..d {
                p[a] = phi[a][i];
            }
            let a1 = sample(&v[0], p);
            let a2 = sample(&v[1], std::array::from_fn(|a| p[a] + 0.5 * dt * a1[a]));
            let a3 = sample(&v[2], std::array::from_fn(|a| p[a] + 0.5 * dt * a2[a]));
            let a4 = sample(&v[3], std::array::from_fn(|a| p[a] + dt * a3[a]));
            for a in 0..d {
                out[a][i] = p[a] + dt / 6.0 * (a1[a] + 2.0 * a2[a] + 2.0 * a3[a] + a4[a]);
            }
        }
        out
    }

    /// One step of the backward trace: moves points `y` at time `t + dt`
    /// to time `t` along the stage velocities of the step `t -> t + dt`.
    pub fn trace_back(&self, y: &Planes, v: &[Planes; 4], dt: f64) -> Planes {
        let d = self.grid.ndim();
        let g = &self.grid;
        let mut out = self.zeros();
        let sample = |vel: &Planes, p: [f64; 3]| {
            let st = g.stencil(p);
            let mut r = [0.0; 3];
            for a in 0..d {
                r[a] = st.sample(&vel[a]);
            }
            r
        };
        for i in 0..g.len() {
            let p: [f64; 3] = std::array::from_fn(|a| if a < d { y[a][i] } else { 0.0 });
            let a1 = sample(&v[3], p);
            let a2 = sample(&v[2], std::array::from_fn(|a| p[a] - 0.5 * dt * a1[a]));
            let a3 = sample(&v[1], std::array::from_fn(|a| p[a] - 0.5 * dt * a2[a]));
            let a4 = sample(&v[0], std::array::from_fn(|a| p[a] - dt * a3[a]));
            for a in 0..d {
                out[a][i] = p[a] - dt / 6.0 * (a1[a] + 2.0 * a2[a] + 2.0 * a3[a] + a4[a]);
            }
        }
        out
    }

    /// Adjoint of [`Self::trace_back`] at input points `y`. Adds the velocity
    /// cotangents into `v_bar` and returns the cotangent of `y`.
    pub fn trace_back_adjoint(&self, y: &Planes, v: &[Planes; 4], dt: f64, out_bar: &Planes, v_bar: &mut [Planes; 4]) -> Planes {
        let d = self.grid.ndim();
        let g = &self.grid;
        let mut y_bar = self.zeros();
        for i in 0..g.len() {
            let ob: [f64; 3] = std::array::from_fn(|a| if a < d { out_bar[a][i] } else { 0.0 });
            if ob.iter().all(|x| *x == 0.0) {
                continue;
            }
            let p: [f64; 3] = std::array::from_fn(|a| if a < d { y[a][i] } else { 0.0 });
            let q1 = p;
            let st1 = g.stencil(q1);
            let a1: [f64; 3] = std::array::from_fn(|a| if a < d { st1.sample(&v[3][a]) } else { 0.0 });
            let q2: [f64; 3] = std::array::from_fn(|a| p[a] - 0.5 * dt * a1[a]);
            let st2 = g.stencil(q2);
            let a2: [f64; 3] = std::array::from_fn(|a| if a < d { st2.sample(&v[2][a]) } else { 0.0 });
            let q3: [f64; 3] = std::array::from_fn(|a| p[a] - 0.5 * dt * a2[a]);
            let st3 = g.stencil(q3);
            let a3: [f64; 3] = std::array::from_fn(|a| if a < d { st3.sample(&v[1][a]) } else { 0.0 });
            let q4: [f64; 3] = std::array::from_fn(|a| p[a] - dt * a3[a]);
            let st4 = g.stencil(q4);

            let mut yb = ob;
            let mut ab1: [f64; 3] = std::array::from_fn(|a| -dt / 6.0 * ob[a]);
            let mut ab2: [f64; 3] = std::array::from_fn(|a| -dt / 3.0 * ob[a]);
            let mut ab3: [f64; 3] = std::array::from_fn(|a| -dt / 3.0 * ob[a]);
            let ab4: [f64; 3] = std::array::from_fn(|a| -dt / 6.0 * ob[a]);
            // Pulls a velocity-sample cotangent back to the sample point.
            let pull = |st: &crate::grid::Stencil, vel: &Planes, vb: &mut Planes, ab: &[f64; 3]| -> [f64; 3] {
                let mut qb = [0.0; 3];
                for c in 0..d {
                    if ab[c] == 0.0 {
                        continue;
                    }
                    st.scatter(ab[c], &mut vb[c]);
                    let gr = st.sample_grad(&vel[c]);
                    for a in 0..d {
                        qb[a] += ab[c] * gr[a];
                    }
                }
                qb
            };
            let qb4 = pull(&st4, &v[0], &mut v_bar[0], &ab4);
            for a in 0..d {
                yb[a] += qb4[a];
                ab3[a] -= dt * qb4[a];
            }
            let qb3 = pull(&st3, &v[1], &mut v_bar[1], &ab3);
            for a in 0..d {
                yb[a] += qb3[a];
                ab2[a] -= 0.5 * dt * qb3[a];
            }
            let qb2 = pull(&st2, &v[2], &mut v_bar[2], &ab2);
            for a in 0..d {
                yb[a] += qb2[a];
                ab1[a] -= 0.5 * dt * qb2[a];
            }
            let qb1 = pull(&st1, &v[3], &mut v_bar[3], &ab1);
            for a in 0..d {
                y_bar[a][i] = yb[a] + qb1[a];
            }
        }
        y_bar
    }

    /// Reverse sweep through one momentum step. `m_bar` is the cotangent of
    /// the step output and `v_bar` holds extra cotangents on the four stage
    /// velocities; returns the cotangent of the step input.
    pub fn step_adjoint(&self, stages: &Stages, dt: f64, m_bar: &Planes, v_bar: &[Planes; 4]) -> Planes {
        let mut m_prev = m_bar.clone();
        let mut k1b: Planes = m_bar.iter().map(|c| c.iter().map(|x| x * dt / 6.0).collect()).collect();
        let mut k2b: Planes = m_bar.iter().map(|c| c.iter().map(|x| x * dt / 3.0).collect()).collect();
        let mut k3b = k2b.clone();
        let k4b = k1b.clone();

        let s4b = self.rhs_vjp(&stages.s[3], &stages.v[3], &k4b, &v_bar[3]);
        add_scaled(&mut m_prev, 1.0, &s4b);
        add_scaled(&mut k3b, dt, &s4b);

        let s3b = self.rhs_vjp(&stages.s[2], &stages.v[2], &k3b, &v_bar[2]);
        add_scaled(&mut m_prev, 1.0, &s3b);
        add_scaled(&mut k2b, 0.5 * dt, &s3b);

        let s2b = self.rhs_vjp(&stages.s[1], &stages.v[1], &k2b, &v_bar[1]);
        add_scaled(&mut m_prev, 1.0, &s2b);
        add_scaled(&mut k1b, 0.5 * dt, &s2b);

        let s1b = self.rhs_vjp(&stages.s[0], &stages.v[0], &k1b, &v_bar[0]);
        add_scaled(&mut m_prev, 1.0, &s1b);

        m_prev
    }
}

/// Traces the grid points back through `steps` (latest last) to time 0.
fn trace_to_origin<'a>(integ: &Integrator, steps: impl DoubleEndedIterator<Item = (&'a [Planes; 4], f64)>) -> Planes {
    let mut y = integ.positions.clone();
    for (v, dt) in steps.rev() {
        y = integ.trace_back(&y, v, dt);
    }
    y
}

/// Forward record of an inverse-map shoot, replayed by the adjoint.
pub(crate) struct InverseTape {
    pub dt: f64,
    pub steps: Vec<Stages>,
    /// Traced points at the end of each step, latest step first:
    /// `ys[0]` is the grid itself and `ys[n]` the inverse map.
    pub ys: Vec<Planes>,
}

/// Integrates the momentum and traces the inverse map. With `record`, keeps
/// what the adjoint sweep needs.
pub(crate) fn shoot_inverse(
    integ: &Integrator,
    m0: &Planes,
    t: f64,
    steps_per_unit_time: usize,
    record: bool,
) -> Result<(Planes, Option<InverseTape>)> {
    let (n, dt) = schedule(t, steps_per_unit_time);
    if t == 0.0 {
        let tape = record.then(|| InverseTape { dt, steps: Vec::new(), ys: vec![integ.positions.clone()] });
        return Ok((integ.positions.clone(), tape));
    }
    let mut m = m0.clone();
    let mut steps = Vec::with_capacity(n);
    for step in 0..n {
        let (next, stages) = integ.momentum_step(&m, dt);
        if !planes_finite(&next) {
            return Err(Error::BlowUp { step, t: (step + 1) as f64 * dt });
        }
        steps.push(stages);
        m = next;
    }
    let mut ys = Vec::with_capacity(if record { n + 1 } else { 0 });
    let mut y = integ.positions.clone();
    for stages in steps.iter().rev() {
        let next = integ.trace_back(&y, &stages.v, dt);
        if record {
            ys.push(y);
        }
        y = next;
    }
    if !planes_finite(&y) {
        return Err(Error::BlowUp { step: n - 1, t });
    }
    if record {
        ys.push(y.clone());
        Ok((y, Some(InverseTape { dt, steps, ys })))
    } else {
        Ok((y, None))
    }
}

/// Pulls a cotangent on the final inverse map back to the initial momentum.
pub(crate) fn inverse_adjoint(integ: &Integrator, tape: &InverseTape, psi_bar_final: Planes) -> Planes {
    let n = tape.steps.len();
    let zeros = || -> [Planes; 4] { std::array::from_fn(|_| integ.zeros()) };
    // The trace runs from the last step to the first, so its adjoint visits
    // steps first to last.
    let mut v_bars: Vec<[Planes; 4]> = (0..n).map(|_| zeros()).collect();
    let mut y_bar = psi_bar_final;
    for k in 0..n {
        // Step k maps ys[n - 1 - k] to ys[n - k].
        let y_in = &tape.ys[n - 1 - k];
        y_bar = integ.trace_back_adjoint(y_in, &tape.steps[k].v, tape.dt, &y_bar, &mut v_bars[k]);
    }
    let mut m_bar = integ.zeros();
    for k in (0..n).rev() {
        m_bar = integ.step_adjoint(&tape.steps[k], tape.dt, &m_bar, &v_bars[k]);
    }
    m_bar
}

#[derive(Clone)]
struct FullState {
    t: f64,
    m: Planes,
    phi: Planes,
    /// Momentum at the start of each step taken so far, with its step size.
    history: Vec<(Planes, f64)>,
}

impl FullState {
    fn start(integ: &Integrator, m0: &[Vec<f64>]) -> Self {
        FullState {
            t: 0.0,
            m: m0.to_vec(),
            phi: integ.positions.clone(),
            history: Vec::new(),
        }
    }

    fn step(mut self, integ: &Integrator, dt: f64, index: usize) -> Result<FullState> {
        let (m, stages) = integ.momentum_step(&self.m, dt);
        let phi = integ.advect_forward(&self.phi, &stages.v, dt);
        let t = self.t + dt;
        if !planes_finite(&m) || !planes_finite(&phi) {
            return Err(Error::BlowUp { step: index, t });
        }
        self.history.push((std::mem::replace(&mut self.m, m), dt));
        Ok(FullState { t, phi, ..self })
    }

    fn inverse_map(&self, integ: &Integrator) -> Result<Planes> {
        // Stage velocities are recomputed rather than kept, so memory stays
        // at one momentum per step.
        let stages: Vec<([Planes; 4], f64)> = self
            .history
            .iter()
            .map(|(m, dt)| (integ.momentum_step(m, *dt).1.v, *dt))
            .collect();
        let psi = trace_to_origin(integ, stages.iter().map(|(v, dt)| (v, *dt)));
        if !planes_finite(&psi) {
            return Err(Error::BlowUp { step: self.history.len().saturating_sub(1), t: self.t });
        }
        Ok(psi)
    }

    fn export(&self, integ: &Integrator, t: f64) -> Result<GeodesicState> {
        let g = integ.grid.clone();
        Ok(GeodesicState {
            t,
            m: VectorField::from_parts(g.clone(), self.m.clone()),
            v: VectorField::from_parts(g.clone(), integ.smooth(&self.m)),
            phi_inv: DeformationMap::from_parts(g.clone(), self.inverse_map(integ)?),
            phi: DeformationMap::from_parts(g, self.phi.clone()),
        })
    }
}

fn check_inputs(m0: &VectorField, cfg: &ShootConfig) -> Result<()> {
    cfg.validate()?;
    if !m0.is_finite() {
        return Err(Error::NonFinite("initial momentum"));
    }
    Ok(())
}

/// Shoots the geodesic with initial momentum `m0` to time `t` (any sign).
pub fn shoot(m0: &VectorField, t: f64, cfg: &ShootConfig) -> Result<GeodesicState> {
    check_inputs(m0, cfg)?;
    if !t.is_finite() {
        return Err(Error::NonFinite("target time"));
    }
    let integ = Integrator::new(m0.grid(), &cfg.kernel);
    shoot_with(&integ, m0, t, cfg.steps_per_unit_time)
}

pub(crate) fn shoot_with(integ: &Integrator, m0: &VectorField, t: f64, steps_per_unit_time: usize) -> Result<GeodesicState> {
    let mut state = FullState::start(integ, m0.components());
    if t == 0.0 {
        return state.export(integ, 0.0);
    }
    let (n, dt) = schedule(t, steps_per_unit_time);
    for i in 0..n {
        state = state.step(integ, dt, i)?;
    }
    state.export(integ, t)
}

/// States at each of the sorted times `ts`, from one integration per
/// direction. Times off the step grid are reached by a shortened final step.
pub fn shoot_sequence(m0: &VectorField, ts: &[f64], cfg: &ShootConfig) -> Result<Vec<GeodesicState>> {
    check_inputs(m0, cfg)?;
    if ts.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("target time"));
    }
    if ts.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("times must be sorted ascending".into()));
    }
    let integ = Integrator::new(m0.grid(), &cfg.kernel);
    let spu = cfg.steps_per_unit_time;
    let h = 1.0 / spu as f64;
    let mut out: Vec<Option<GeodesicState>> = vec![None; ts.len()];

    // Negative times are walked backwards from 0 in order of increasing |t|.
    let negative: Vec<usize> = (0..ts.len()).rev().filter(|&i| ts[i] < 0.0).collect();
    let positive: Vec<usize> = (0..ts.len()).filter(|&i| ts[i] >= 0.0).collect();
    for (indices, sign) in [(negative, -1.0), (positive, 1.0)] {
        let mut state = FullState::start(&integ, m0.components());
        let mut done = 0usize;
        for i in indices {
            let target = ts[i];
            let q = target.abs() * spu as f64;
            let mut full = q.floor() as usize;
            let mut rem = q - full as f64;
            if rem > 1.0 - 1e-9 {
                full += 1;
                rem = 0.0;
            }
            while done < full {
                state = state.step(&integ, sign * h, done)?;
                done += 1;
            }
            if rem > 1e-9 {
                let partial = state.clone().step(&integ, sign * rem * h, done)?;
                out[i] = Some(partial.export(&integ, target)?);
            } else {
                out[i] = Some(state.export(&integ, target)?);
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every time visited")).collect())
}

/// Numerical right-hand side of EPDiff for given momentum and velocity.
pub fn epdiff_rhs(m: &VectorField, v: &VectorField) -> Result<VectorField> {
    m.grid().check_same(v.grid(), "epdiff rhs")?;
    // Only the differencing is needed; the kernel is irrelevant here.
    let integ = Integrator {
        grid: m.grid().clone(),
        smoother: Smoother::new(m.grid(), &KernelSpec::single(1.0)?),
        positions: Vec::new(),
    };
    Ok(VectorField::from_parts(
        m.grid().clone(),
        integ.rhs(&m.components().to_vec(), &v.components().to_vec()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{inner_product, planes_dot};

    fn smooth_bump(grid: &GridSpec, amp: f64) -> VectorField {
        let c = grid.extent() / 2.0;
        let s = grid.extent() / 8.0;
        VectorField::from_fn(grid.clone(), |p| {
            let r2 = (p[0] - c).powi(2) + (p[1] - c).powi(2);
            let e = amp * (-r2 / (2.0 * s * s)).exp();
            [e * (p[0] - c) / s, 0.5 * e, 0.0]
        })
    }

    #[test]
    fn schedule_alignment() {
        assert_eq!(schedule(1.0, 20), (20, 0.05));
        assert_eq!(schedule(-2.0, 20), (40, -0.05));
        let (n, dt) = schedule(0.33, 20);
        assert_eq!(n, 7);
        assert!((dt * 7.0 - 0.33).abs() < 1e-15);
        assert_eq!(schedule(0.001, 20).0, 1);
    }

    #[test]
    fn rhs_trivial_cases() {
        let g = GridSpec::unit(&[12, 10]).unwrap();
        let m = smooth_bump(&g, 1.0);
        let z = VectorField::zeros(g.clone());
        assert_eq!(epdiff_rhs(&z, &m).unwrap().max_abs(), 0.0);
        assert_eq!(epdiff_rhs(&m, &z).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rhs_matches_symbolic_1d_analog() {
        // Fields varying along x only, with zero y components: the system
        // reduces to -(v' m + v' m + m' v) for the x component.
        let n = 200;
        let h = 2.0 * std::f64::consts::PI / (n - 1) as f64;
        let g = GridSpec::new(&[n, 4], &[h, 1.0], &[0.0, 0.0]).unwrap();
        let m = VectorField::from_fn(g.clone(), |p| [p[0].sin(), 0.0, 0.0]);
        // v = 0.5 sin x + 0.2 cos 2x stands in for K * m (any smooth field works
        // for checking the operator).
        let v = VectorField::from_fn(g.clone(), |p| [0.5 * p[0].sin() + 0.2 * (2.0 * p[0]).cos(), 0.0, 0.0]);
        let r = epdiff_rhs(&m, &v).unwrap();
        for i in 0..g.len() {
            let idx = g.unflatten(i);
            if idx[0] < 2 || idx[0] > n - 3 {
                continue;
            }
            let x = g.position(i)[0];
            let mv = x.sin();
            let dm = x.cos();
            let vv = 0.5 * x.sin() + 0.2 * (2.0 * x).cos();
            let dv = 0.5 * x.cos() - 0.4 * (2.0 * x).sin();
            let expected = -(dv * mv + dv * mv + dm * vv);
            assert!((r.component(0)[i] - expected).abs() < 5e-3, "{} vs {expected}", r.component(0)[i]);
            assert_eq!(r.component(1)[i], 0.0);
        }
    }

    #[test]
    fn zero_momentum_is_identity() {
        let g = GridSpec::unit(&[16, 16]).unwrap();
        let cfg = ShootConfig::default_for_grid(&g);
        let s = shoot(&VectorField::zeros(g.clone()), 1.3, &cfg).unwrap();
        let id = identity_map(&g);
        assert_eq!(s.phi_inv, id);
        assert_eq!(s.phi, id);
        assert_eq!(s.m.max_abs(), 0.0);
    }

    #[test]
    fn time_zero_is_identity() {
        let g = GridSpec::unit(&[16, 16]).unwrap();
        let cfg = ShootConfig::default_for_grid(&g);
        let s = shoot(&smooth_bump(&g, 2.0), 0.0, &cfg).unwrap();
        let id = identity_map(&g);
        assert_eq!(s.phi_inv, id);
        assert_eq!(s.phi, id);
    }

    #[test]
    fn rhs_vjp_matches_directional_derivative() {
        let g = GridSpec::new(&[11, 9], &[1.0, 1.2], &[0.0, 0.0]).unwrap();
        let k = KernelSpec::equal_weights(&[1.5, 3.0]).unwrap();
        let integ = Integrator::new(&g, &k);
        let mk = |seed: u64| -> Planes {
            let mut s = seed;
            (0..2)
                .map(|_| {
                    (0..g.len())
                        .map(|_| {
                            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                        })
                        .collect()
                })
                .collect()
        };
        let m = mk(1);
        let dir = mk(2);
        let lam = mk(3);
        let f = |x: &Planes| integ.rhs(x, &integ.smooth(x));
        let eps = 1e-6;
        let fp = f(&axpy_planes(&m, eps, &dir));
        let fm = f(&axpy_planes(&m, -eps, &dir));
        let fd: f64 = planes_dot(&lam, &fp) - planes_dot(&lam, &fm);
        let fd = fd / (2.0 * eps);
        let v = integ.smooth(&m);
        let adj = planes_dot(&integ.rhs_vjp(&m, &v, &lam, &integ.zeros()), &dir);
        assert!((fd - adj).abs() < 1e-7 * fd.abs().max(1.0), "{fd} vs {adj}");
    }

    #[test]
    fn energy_is_conserved() {
        let g = GridSpec::unit(&[32, 32]).unwrap();
        let cfg = ShootConfig::default_for_grid(&g);
        let m0 = smooth_bump(&g, 0.5);
        let states = shoot_sequence(&m0, &[0.0, 0.25, 0.5, 0.75, 1.0], &cfg).unwrap();
        let e0 = inner_product(&states[0].m, &states[0].v).unwrap();
        for s in &states {
            let e = inner_product(&s.m, &s.v).unwrap();
            assert!(((e - e0) / e0).abs() < 0.01, "t={} e={e} e0={e0}", s.t);
        }
    }

    #[test]
    fn sequence_matches_shoot_on_step_grid() {
        let g = GridSpec::unit(&[20, 20]).unwrap();
        let cfg = ShootConfig::default_for_grid(&g);
        let m0 = smooth_bump(&g, 0.5);
        let seq = shoot_sequence(&m0, &[-0.5, 1.0], &cfg).unwrap();
        let a = shoot(&m0, 1.0, &cfg).unwrap();
        assert_eq!(seq[1], a);
        let b = shoot(&m0, -0.5, &cfg).unwrap();
        assert_eq!(seq[0], b);
    }

    #[test]
    fn time_reversal() {
        let g = GridSpec::unit(&[20, 20]).unwrap();
        let cfg = ShootConfig::default_for_grid(&g);
        let m0 = smooth_bump(&g, 0.5);
        let back = shoot(&m0, -0.7, &cfg).unwrap();
        let fwd = shoot(&m0.scale(-1.0), 0.7, &cfg).unwrap();
        for a in 0..2 {
            for (x, y) in back.phi_inv.coords()[a].iter().zip(&fwd.phi_inv.coords()[a]) {
                assert!((x - y).abs() < 1e-8);
            }
            for (x, y) in back.phi.coords()[a].iter().zip(&fwd.phi.coords()[a]) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }
}
