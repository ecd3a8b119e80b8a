//! Geodesic subspaces: convex combinations of registered momenta, uniform
//! sampling of simplex weights and geodesic time, and the resulting
//! deformation pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{min_jacobian_determinant, DeformationMap, VectorField};
use crate::registration::RegResult;
use crate::shooting::{shoot, ShootConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumProvenance {
    pub target_id: String,
    pub regularity: f64,
    pub similarity: f64,
    pub initial_similarity: f64,
    pub iterations: usize,
}

impl MomentumProvenance {
    pub fn from_result(target_id: &str, r: &RegResult) -> Self {
        MomentumProvenance {
            target_id: target_id.to_string(),
            regularity: r.final_energy.regularity,
            similarity: r.final_energy.similarity,
            initial_similarity: r.initial_similarity,
            iterations: r.converged.iterations,
        }
    }

    /// A momentum supplied without its registration record.
    pub fn external(target_id: &str) -> Self {
        MomentumProvenance { target_id: target_id.to_string(), regularity: 0.0, similarity: 0.0, initial_similarity: 0.0, iterations: 0 }
    }
}

/// `K` initial momenta anchored at one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSet {
    source_id: String,
    momenta: Vec<VectorField>,
    provenance: Vec<MomentumProvenance>,
}

impl MomentumSet {
    pub fn new(source_id: String, momenta: Vec<VectorField>, provenance: Vec<MomentumProvenance>) -> Result<Self> {
        if momenta.is_empty() {
            return Err(Error::Empty("momentum set"));
        }
        if provenance.len() != momenta.len() {
            return Err(Error::InvalidConfig("one provenance record per momentum required".into()));
        }
        let g = momenta[0].grid();
        for m in &momenta[1..] {
            g.check_same(m.grid(), "momentum set")?;
        }
        Ok(MomentumSet { source_id, momenta, provenance })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn momenta(&self) -> &[VectorField] {
        &self.momenta
    }

    pub fn provenance(&self) -> &[MomentumProvenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.momenta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.momenta.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Closed interval of geodesic times.
    pub t_range: [f64; 2],
    pub k: usize,
    pub rng_seed: u64,
    pub shoot: ShootConfig,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.t_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig(format!("t_range [{lo}, {hi}] is empty")));
        }
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        self.shoot.validate()
    }

    /// `t_range` degenerate at zero: every sample is the identity.
    pub fn identity_only(&self) -> bool {
        self.t_range == [0.0, 0.0]
    }
}

/// Independent RNG stream for item `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `Σ λ_j m_j` for weights on the simplex.
pub fn convex_combination(set: &MomentumSet, lambda: &[f64]) -> Result<VectorField> {
    let lambda = normalize_weights(lambda, set.len())?;
    combine(set, &lambda)
}

/// Weighted sum with weights taken as given.
fn combine(set: &MomentumSet, lambda: &[f64]) -> Result<VectorField> {
    if let Some(j) = lambda.iter().position(|&l| l == 1.0) {
        return Ok(set.momenta[j].clone());
    }
    let g = set.momenta[0].grid().clone();
    let d = g.ndim();
    let mut comps = vec![vec![0.0; g.len()]; d];
    for (m, &l) in set.momenta.iter().zip(lambda) {
        if l == 0.0 {
            continue;
        }
        for (acc, c) in comps.iter_mut().zip(m.components()) {
            for (a, x) in acc.iter_mut().zip(c) {
                *a += l * x;
            }
        }
    }
    VectorField::new(g, comps)
}

fn normalize_weights(lambda: &[f64], k: usize) -> Result<Vec<f64>> {
    if lambda.len() != k {
        return Err(Error::InvalidWeights(format!("{} weights for {} momenta", lambda.len(), k)));
    }
    if lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidWeights("weights must be finite and nonnegative".into()));
    }
    let sum: f64 = lambda.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidWeights("weights sum to zero".into()));
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}, expected 1")));
    }
    Ok(lambda.iter().map(|l| l / sum).collect())
}

/// Uniform draw from the (K-1)-simplex via normalized exponential spacings.
pub fn sample_lambda<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let e: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Uniform draw from `cfg.t_range`.
pub fn sample_t<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> f64 {
    let [lo, hi] = cfg.t_range;
    if lo == hi {
        return lo;
    }
    rng.random_range(lo..=hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSeed {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceSample {
    pub lambda: Vec<f64>,
    pub t: f64,
    pub m_tilde: VectorField,
    pub phi_inv: DeformationMap,
    pub phi: DeformationMap,
    pub seed: Option<SampleSeed>,
}

impl SubspaceSample {
    pub fn min_jacobian(&self) -> f64 {
        min_jacobian_determinant(&self.phi_inv)
    }
}

/// Shoots the combination `lambda` to time `t`.
pub fn sample_at(set: &MomentumSet, lambda: &[f64], t: f64, shoot_cfg: &ShootConfig) -> Result<SubspaceSample> {
    let lambda = normalize_weights(lambda, set.len())?;
    sample_normalized(set, lambda, t, shoot_cfg)
}

/// As [`sample_at`] for weights already normalized by it; replaying a stored
/// sample through here reproduces it bit-exactly.
pub(crate) fn sample_normalized(set: &MomentumSet, lambda: Vec<f64>, t: f64, shoot_cfg: &ShootConfig) -> Result<SubspaceSample> {
    if lambda.len() != set.len() {
        return Err(Error::InvalidWeights(format!("{} weights for {} momenta", lambda.len(), set.len())));
    }
    let m_tilde = combine(set, &lambda)?;
    let state = shoot(&m_tilde, t, shoot_cfg).map_err(|e| match e {
        Error::BlowUp { step, t: at } => Error::Pipeline(format!(
            "geodesic blow-up at step {step} (t = {at}) for lambda = {lambda:?}, t = {t}"
        )),
        other => other,
    })?;
    Ok(SubspaceSample {
        lambda,
        t,
        m_tilde,
        phi_inv: state.phi_inv,
        phi: state.phi,
        seed: None,
    })
}

/// Draws lambda then t from `rng` and shoots.
pub fn draw_sample_with<R: Rng + ?Sized>(set: &MomentumSet, cfg: &SamplerConfig, rng: &mut R) -> Result<SubspaceSample> {
    cfg.validate()?;
    let lambda = sample_lambda(set.len(), rng)?;
    let t = sample_t(cfg, rng);
    sample_at(set, &lambda, t, &cfg.shoot)
}

/// Sample `stream` of the run seeded by `cfg.rng_seed`; a pure function of
/// `(set, cfg, stream)`.
pub fn draw_sample(set: &MomentumSet, cfg: &SamplerConfig, stream: u64) -> Result<SubspaceSample> {
    let mut rng = stream_rng(cfg.rng_seed, stream);
    let mut s = draw_sample_with(set, cfg, &mut rng)?;
    s.seed = Some(SampleSeed { seed: cfg.rng_seed, stream });
    Ok(s)
}
