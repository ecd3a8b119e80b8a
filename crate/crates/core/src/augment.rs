//! Augmentation pipelines: training-time sampling from geodesic subspaces,
//! test-time views with label fusion, one-shot atlas synthesis, and the random
//! B-spline baseline. Also label maps, soft labels and Dice.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    compose_maps, identity_map, min_jacobian_determinant, sample_planes, DeformationMap, GridSpec, Interpolate,
    ScalarField, VectorField,
};
use crate::registration::{register, RegConfig};
use crate::shooting::{shoot, ShootConfig};
use crate::subspace::{
    sample_at, sample_lambda, sample_normalized, sample_t, stream_rng, MomentumProvenance, MomentumSet,
    SamplerConfig, SubspaceSample,
};

/// Integer labels on a grid; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: GridSpec,
    labels: Vec<u16>,
    label_count: usize,
}

impl LabelMap {
    pub fn new(grid: GridSpec, labels: Vec<u16>, label_count: usize) -> Result<Self> {
        if label_count == 0 || label_count > u16::MAX as usize + 1 {
            return Err(Error::InvalidLabels(format!("label count {label_count}")));
        }
        if labels.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} labels for a grid of {} points", labels.len(), grid.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= label_count) {
            return Err(Error::InvalidLabels(format!("label {l} >= label count {label_count}")));
        }
        Ok(LabelMap { grid, labels, label_count })
    }

    pub fn constant(grid: GridSpec, label: u16, label_count: usize) -> Result<Self> {
        let n = grid.len();
        LabelMap::new(grid, vec![label; n], label_count)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Renames label `l` to `perm[l]`.
    pub fn relabel(&self, perm: &[u16]) -> Result<LabelMap> {
        if perm.len() != self.label_count {
            return Err(Error::InvalidLabels("permutation length differs from label count".into()));
        }
        let labels = self.labels.iter().map(|&l| perm[l as usize]).collect();
        LabelMap::new(self.grid.clone(), labels, self.label_count)
    }

    pub fn one_hot(&self) -> Vec<Vec<f64>> {
        let mut planes = vec![vec![0.0; self.grid.len()]; self.label_count];
        for (i, &l) in self.labels.iter().enumerate() {
            planes[l as usize][i] = 1.0;
        }
        planes
    }
}

/// Per-point label probabilities, one plane per label.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelField {
    grid: GridSpec,
    probs: Vec<Vec<f64>>,
}

impl SoftLabelField {
    pub fn new(grid: GridSpec, probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidLabels("soft labels need at least one channel".into()));
        }
        if probs.iter().any(|p| p.len() != grid.len()) {
            return Err(Error::GridMismatch("soft label channel length differs from grid".into()));
        }
        if probs.iter().flatten().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidLabels("probabilities must be finite and nonnegative".into()));
        }
        Ok(SoftLabelField { grid, probs })
    }

    /// One-hot labels softened to `confidence` on the assigned label, the rest
    /// spread evenly over the others.
    pub fn from_labels(labels: &LabelMap, confidence: f64) -> Self {
        let l = labels.label_count;
        let (hi, lo) = if l == 1 { (1.0, 0.0) } else { (confidence, (1.0 - confidence) / (l - 1) as f64) };
        let mut probs = vec![vec![lo; labels.grid.len()]; l];
        for (i, &k) in labels.labels.iter().enumerate() {
            probs[k as usize][i] = hi;
        }
        SoftLabelField { grid: labels.grid.clone(), probs }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn label_count(&self) -> usize {
        self.probs.len()
    }

    /// Largest deviation of a per-point sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| (self.probs.iter().map(|p| p[i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Per-point argmax; ties go to the smaller label.
    pub fn argmax(&self) -> LabelMap {
        let labels = (0..self.grid.len())
            .map(|i| {
                let mut best = 0;
                for k in 1..self.probs.len() {
                    if self.probs[k][i] > self.probs[best][i] {
                        best = k;
                    }
                }
                best as u16
            })
            .collect();
        LabelMap { grid: self.grid.clone(), labels, label_count: self.probs.len() }
    }

    fn add_assign(&mut self, other: &SoftLabelField) {
        for (a, b) in self.probs.iter_mut().zip(&other.probs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Interpolate for SoftLabelField {
    fn interpolate(&self, points: &DeformationMap) -> Result<Self> {
        self.grid.check_ndim(points.grid())?;
        let probs = sample_planes(&self.grid, &self.probs, points);
        Ok(SoftLabelField { grid: points.grid().clone(), probs })
    }
}

/// Image to soft segmentation on the same grid.
pub trait Segmenter: Sync {
    fn segment(&self, image: &ScalarField) -> Result<SoftLabelField>;
}

impl<F> Segmenter for F
where
    F: Fn(&ScalarField) -> Result<SoftLabelField> + Sync,
{
    fn segment(&self, image: &ScalarField) -> Result<SoftLabelField> {
        self(image)
    }
}

/// One-hot encodes, warps each channel multilinearly, takes the argmax (ties
/// to the smaller label). The result lives on `map`'s grid.
pub fn warp_labels(labels: &LabelMap, map: &DeformationMap) -> Result<LabelMap> {
    labels.grid.check_ndim(map.grid())?;
    let n = map.grid().len();
    let mut acc = vec![0.0; labels.label_count];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = labels.grid.stencil(map.point(i));
        acc.iter_mut().for_each(|a| *a = 0.0);
        for c in 0..s.n {
            acc[labels.labels[s.idx[c]] as usize] += s.w[c];
        }
        let mut best = 0;
        for k in 1..acc.len() {
            if acc[k] > acc[best] {
                best = k;
            }
        }
        out.push(best as u16);
    }
    Ok(LabelMap { grid: map.grid().clone(), labels: out, label_count: labels.label_count })
}

/// Pointwise sum of soft labels followed by argmax.
pub fn label_fusion(softs: &[SoftLabelField]) -> Result<LabelMap> {
    Ok(fuse(softs)?.argmax())
}

fn fuse(softs: &[SoftLabelField]) -> Result<SoftLabelField> {
    let first = softs.first().ok_or(Error::Empty("soft label list"))?;
    let mut acc = first.clone();
    for s in &softs[1..] {
        first.grid.check_same(&s.grid, "label fusion")?;
        if s.label_count() != first.label_count() {
            return Err(Error::InvalidLabels(format!(
                "label counts {} and {} in fusion",
                first.label_count(),
                s.label_count()
            )));
        }
        acc.add_assign(s);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    /// Labels 1..L in order.
    pub per_label: Vec<f64>,
    /// Mean over foreground labels.
    pub mean: f64,
}

pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<DiceScores> {
    a.grid.check_same(&b.grid, "dice")?;
    if a.label_count != b.label_count {
        return Err(Error::InvalidLabels(format!("label counts {} and {}", a.label_count, b.label_count)));
    }
    let l = a.label_count;
    let mut inter = vec![0usize; l];
    let mut na = vec![0usize; l];
    let mut nb = vec![0usize; l];
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        na[x as usize] += 1;
        nb[y as usize] += 1;
        if x == y {
            inter[x as usize] += 1;
        }
    }
    let per_label: Vec<f64> = (1..l)
        .map(|k| {
            let denom = na[k] + nb[k];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[k] as f64 / denom as f64
            }
        })
        .collect();
    let mean = if per_label.is_empty() { 1.0 } else { per_label.iter().sum::<f64>() / per_label.len() as f64 };
    Ok(DiceScores { per_label, mean })
}

fn check_fold(map: &DeformationMap, context: impl FnOnce() -> String) -> Result<f64> {
    let d = min_jacobian_determinant(map);
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::Fold { min_det: d, context: context() })
    }
}

// ---------------------------------------------------------------------------
// Momentum cache

#[derive(Debug, Clone, PartialEq)]
pub struct CachedRegistration {
    pub m0: VectorField,
    pub provenance: MomentumProvenance,
}

type CacheKey = (String, String, String);

/// Registrations keyed by (source id, target id, config fingerprint), shared
/// across pipelines and optionally persisted to a directory.
#[derive(Debug, Default)]
pub struct MomentumCache {
    entries: RwLock<HashMap<CacheKey, Arc<CachedRegistration>>>,
    dir: Option<PathBuf>,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl MomentumCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(MomentumCache { entries: RwLock::default(), dir: Some(dir) })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn paths(&self, key: &CacheKey) -> Option<(PathBuf, PathBuf)> {
        use sha2::{Digest, Sha256};
        let dir = self.dir.as_ref()?.join(&key.2);
        let mut h = Sha256::new();
        h.update(key.0.as_bytes());
        h.update([0u8]);
        h.update(key.1.as_bytes());
        let stem = hex::encode(&h.finalize()[..16]);
        Some((dir.join(format!("{stem}.gf")), dir.join(format!("{stem}.json"))))
    }

    fn load(&self, key: &CacheKey) -> Result<Option<CachedRegistration>> {
        let Some((field, meta)) = self.paths(key) else { return Ok(None) };
        if !field.exists() || !meta.exists() {
            return Ok(None);
        }
        let m0: VectorField = crate::io::read_field(&field)?;
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let provenance = serde_json::from_str(&text)
            .map_err(|e| Error::Pipeline(format!("corrupt cache entry {}: {e}", meta.display())))?;
        Ok(Some(CachedRegistration { m0, provenance }))
    }

    fn store(&self, key: &CacheKey, entry: &CachedRegistration) -> Result<()> {
        let Some((field, meta)) = self.paths(key) else { return Ok(()) };
        let dir = field.parent().unwrap();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tag = format!("tmp{}-{}", std::process::id(), TMP_COUNTER.fetch_add(1, Ordering::Relaxed));
        let tmp_field = field.with_extension(format!("gf.{tag}"));
        let tmp_meta = meta.with_extension(format!("json.{tag}"));
        crate::io::write_field(&tmp_field, &entry.m0)?;
        let json = serde_json::to_string_pretty(&entry.provenance).expect("provenance serializes");
        fs::write(&tmp_meta, json).map_err(|e| Error::io(&tmp_meta, e))?;
        fs::rename(&tmp_field, &field).map_err(|e| Error::io(&field, e))?;
        fs::rename(&tmp_meta, &meta).map_err(|e| Error::io(&meta, e))?;
        Ok(())
    }

    /// The registration `source -> target`, computed on first request.
    pub fn get_or_register(
        &self,
        source_id: &str,
        source: &ScalarField,
        target_id: &str,
        target: &ScalarField,
        reg: &RegConfig,
    ) -> Result<Arc<CachedRegistration>> {
        let key = (source_id.to_string(), target_id.to_string(), reg.fingerprint());
        if let Some(e) = self.entries.read().unwrap().get(&key) {
            return Ok(e.clone());
        }
        let entry = match self.load(&key)? {
            Some(e) if e.m0.grid() == source.grid() => e,
            _ => {
                let r = register(source, target, reg)?;
                let e = CachedRegistration { provenance: MomentumProvenance::from_result(target_id, &r), m0: r.m0 };
                self.store(&key, &e)?;
                e
            }
        };
        let mut map = self.entries.write().unwrap();
        Ok(map.entry(key).or_insert_with(|| Arc::new(entry)).clone())
    }
}

// ---------------------------------------------------------------------------
// Pipeline records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineTag {
    FluidAugTrain,
    FluidAugTest,
    FluidAugReal,
    FluidAugRealT1,
    BrainstormReal,
    Bspline,
}

/// Everything needed to regenerate an example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub pipeline: PipelineTag,
    pub source_id: String,
    /// Registration targets whose momenta span the sampled subspace.
    pub target_ids: Vec<String>,
    /// One-shot appearance donor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance_id: Option<String>,
    pub lambda: Vec<f64>,
    pub t: f64,
    pub seed: u64,
    pub stream: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bspline: Option<BSplineSetting>,
    pub min_jacobian: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExample {
    pub image: ScalarField,
    pub labels: LabelMap,
    pub lineage: Lineage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFailure {
    pub source_id: String,
    pub target_id: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub examples: Vec<AugmentedExample>,
    pub failures: Vec<PairFailure>,
    /// Output indices that could not be produced because every redraw hit a
    /// failed registration.
    pub dropped: Vec<u64>,
}

/// A labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub image: ScalarField,
    pub labels: LabelMap,
}

impl Subject {
    pub fn new(id: impl Into<String>, image: ScalarField, labels: LabelMap) -> Result<Self> {
        image.grid().check_same(labels.grid(), "image/labels")?;
        Ok(Subject { id: id.into(), image, labels })
    }
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidConfig(format!("duplicate dataset id {id:?}")));
        }
    }
    Ok(())
}

fn check_one_grid<'a>(first: &GridSpec, rest: impl Iterator<Item = &'a GridSpec>) -> Result<()> {
    for g in rest {
        first.check_same(g, "dataset")?;
    }
    Ok(())
}

/// Registers each distinct pair once, in parallel. Results align with `pairs`.
fn register_pairs<'a>(
    pairs: &[(&'a str, &'a ScalarField, &'a str, &'a ScalarField)],
    reg: &RegConfig,
    cache: &MomentumCache,
) -> Vec<Result<Arc<CachedRegistration>, PairFailure>> {
    pairs
        .par_iter()
        .map(|&(sid, s, tid, t)| {
            cache.get_or_register(sid, s, tid, t, reg).map_err(|e| PairFailure {
                source_id: sid.to_string(),
                target_id: tid.to_string(),
                code: e.code().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// `k` distinct indices from `pool`, in draw order.
fn pick_distinct<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

const MAX_ROUNDS: usize = 10;

// ---------------------------------------------------------------------------
// Training-time augmentation

struct TrainDraw {
    stream: u64,
    rng: ChaCha8Rng,
    source: usize,
    targets: Vec<usize>,
}

/// Samples `n_out` examples from the geodesic subspaces of randomly chosen
/// sources. Example `i` uses RNG stream `i` of `cfg.rng_seed`.
pub fn augment_train(
    dataset: &[Subject],
    n_out: usize,
    cfg: &SamplerConfig,
    reg: &RegConfig,
    cache: &MomentumCache,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    reg.validate()?;
    let n = dataset.len();
    if n < cfg.k + 1 {
        return Err(Error::InvalidConfig(format!("{n} images cannot support K = {}", cfg.k)));
    }
    check_unique_ids(dataset.iter().map(|s| s.id.as_str()))?;
    check_one_grid(dataset[0].image.grid(), dataset.iter().map(|s| s.image.grid()))?;

    let mut failed: HashSet<(usize, usize)> = HashSet::new();
    let mut failures = Vec::new();
    let mut pending: Vec<TrainDraw> = (0..n_out as u64)
        .map(|stream| TrainDraw { stream, rng: stream_rng(cfg.rng_seed, stream), source: 0, targets: vec![] })
        .collect();
    let mut ready: Vec<TrainDraw> = Vec::with_capacity(n_out);
    let mut dropped = Vec::new();

    for round in 0..=MAX_ROUNDS {
        if pending.is_empty() {
            break;
        }
        if round == MAX_ROUNDS {
            dropped.extend(pending.iter().map(|d| d.stream));
            break;
        }
        for d in &mut pending {
            d.source = d.rng.random_range(0..n);
            let pool: Vec<usize> = (0..n).filter(|&j| j != d.source).collect();
            d.targets = pick_distinct(&mut d.rng, &pool, cfg.k);
        }
        if !cfg.identity_only() {
            let mut todo: Vec<(usize, usize)> = pending
                .iter()
                .flat_map(|d| d.targets.iter().map(move |&j| (d.source, j)))
                .collect();
            todo.sort_unstable();
            todo.dedup();
            let pairs: Vec<_> = todo
                .iter()
                .map(|&(c, j)| (dataset[c].id.as_str(), &dataset[c].image, dataset[j].id.as_str(), &dataset[j].image))
                .collect();
            for (pair, res) in todo.iter().zip(register_pairs(&pairs, reg, cache)) {
                if let Err(f) = res {
                    if failed.insert(*pair) {
                        failures.push(f);
                    }
                }
            }
        }
        let (ok, retry): (Vec<_>, Vec<_>) = pending
            .into_iter()
            .partition(|d| d.targets.iter().all(|&j| !failed.contains(&(d.source, j))));
        ready.extend(ok);
        pending = retry;
    }
    ready.sort_by_key(|d| d.stream);

    let examples = ready
        .into_par_iter()
        .map(|mut d| {
            let lambda = sample_lambda(cfg.k, &mut d.rng)?;
            let t = sample_t(cfg, &mut d.rng);
            let src = &dataset[d.source];
            let targets: Vec<&Subject> = d.targets.iter().map(|&j| &dataset[j]).collect();
            let sample = if cfg.identity_only() {
                identity_sample(src.image.grid(), lambda, t)
            } else {
                let set = train_set(src, &targets, reg, cache)?;
                sample_at(&set, &lambda, t, &cfg.shoot)?
            };
            emit(
                &src.image,
                &src.labels,
                &sample,
                Lineage {
                    pipeline: PipelineTag::FluidAugTrain,
                    source_id: src.id.clone(),
                    target_ids: targets.iter().map(|s| s.id.clone()).collect(),
                    appearance_id: None,
                    lambda: sample.lambda.clone(),
                    t,
                    seed: cfg.rng_seed,
                    stream: d.stream,
                    bspline: None,
                    min_jacobian: 0.0,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineOutput { examples, failures, dropped })
}

fn identity_sample(grid: &GridSpec, lambda: Vec<f64>, t: f64) -> SubspaceSample {
    let id = identity_map(grid);
    SubspaceSample { lambda, t, m_tilde: VectorField::zeros(grid.clone()), phi_inv: id.clone(), phi: id, seed: None }
}

fn train_set(src: &Subject, targets: &[&Subject], reg: &RegConfig, cache: &MomentumCache) -> Result<MomentumSet> {
    let mut momenta = Vec::with_capacity(targets.len());
    let mut provenance = Vec::with_capacity(targets.len());
    for tgt in targets {
        let e = cache.get_or_register(&src.id, &src.image, &tgt.id, &tgt.image, reg)?;
        momenta.push(e.m0.clone());
        provenance.push(e.provenance.clone());
    }
    MomentumSet::new(src.id.clone(), momenta, provenance)
}

fn emit(image: &ScalarField, labels: &LabelMap, sample: &SubspaceSample, mut lineage: Lineage) -> Result<AugmentedExample> {
    lineage.min_jacobian = check_fold(&sample.phi_inv, || {
        format!("{} lambda={:?} t={} stream={}", lineage.source_id, sample.lambda, sample.t, lineage.stream)
    })?;
    Ok(AugmentedExample { image: image.interpolate(&sample.phi_inv)?, labels: warp_labels(labels, &sample.phi_inv)?, lineage })
}

/// Rebuilds a training example from its lineage.
pub fn replay_train(dataset: &[Subject], lineage: &Lineage, shoot_cfg: &ShootConfig, reg: &RegConfig, cache: &MomentumCache) -> Result<AugmentedExample> {
    let find = |id: &str| {
        dataset
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Pipeline(format!("lineage refers to unknown subject {id:?}")))
    };
    let src = find(&lineage.source_id)?;
    let targets = lineage.target_ids.iter().map(|id| find(id)).collect::<Result<Vec<_>>>()?;
    let sample = if lineage.t == 0.0 {
        identity_sample(src.image.grid(), lineage.lambda.clone(), 0.0)
    } else {
        let set = train_set(src, &targets, reg, cache)?;
        sample_normalized(&set, lineage.lambda.clone(), lineage.t, shoot_cfg)?
    };
    let mut l = lineage.clone();
    l.min_jacobian = 0.0;
    emit(&src.image, &src.labels, &sample, l)
}

// ---------------------------------------------------------------------------
// Test-time augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDiagnostic {
    pub view: u64,
    pub target_ids: Vec<String>,
    pub lambda: Vec<f64>,
    pub t: f64,
    pub min_jacobian: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOutput {
    pub labels: LabelMap,
    /// Summed soft labels before the argmax.
    pub fused: SoftLabelField,
    pub views: Vec<ViewDiagnostic>,
}

/// Segments `image` through `n_views` geodesic views, mapping each prediction
/// back and fusing. View `v` uses RNG stream `v`; targets are re-drawn per view.
#[allow(clippy::too_many_arguments)]
pub fn augment_test(
    test_id: &str,
    image: &ScalarField,
    train: &[(String, ScalarField)],
    seg: &dyn Segmenter,
    n_views: usize,
    cfg: &SamplerConfig,
    reg: &RegConfig,
    cache: &MomentumCache,
) -> Result<TestOutput> {
    cfg.validate()?;
    if n_views < 1 {
        return Err(Error::InvalidConfig("n_views must be >= 1".into()));
    }
    let skip_registration = cfg.identity_only();
    if !skip_registration {
        reg.validate()?;
        if train.len() < cfg.k {
            return Err(Error::InvalidConfig(format!("{} training images cannot support K = {}", train.len(), cfg.k)));
        }
        check_one_grid(image.grid(), train.iter().map(|(_, t)| t.grid()))?;
    }

    struct View {
        v: u64,
        targets: Vec<usize>,
        lambda: Vec<f64>,
        t: f64,
    }
    let pool: Vec<usize> = (0..train.len()).collect();
    let views: Vec<View> = (0..n_views as u64)
        .map(|v| {
            let mut rng = stream_rng(cfg.rng_seed, v);
            let targets = if skip_registration { vec![] } else { pick_distinct(&mut rng, &pool, cfg.k) };
            let lambda = sample_lambda(cfg.k, &mut rng)?;
            let t = sample_t(cfg, &mut rng);
            Ok(View { v, targets, lambda, t })
        })
        .collect::<Result<_>>()?;

    let mut needed: Vec<usize> = views.iter().flat_map(|w| w.targets.iter().copied()).collect();
    needed.sort_unstable();
    needed.dedup();
    let pairs: Vec<_> = needed.iter().map(|&j| (test_id, image, train[j].0.as_str(), &train[j].1)).collect();
    let regs: HashMap<usize, Result<Arc<CachedRegistration>, PairFailure>> =
        needed.iter().copied().zip(register_pairs(&pairs, reg, cache)).collect();

    let results: Vec<(ViewDiagnostic, Option<SoftLabelField>)> = views
        .into_par_iter()
        .map(|w| -> Result<_> {
            let mut diag = ViewDiagnostic {
                view: w.v,
                target_ids: w.targets.iter().map(|&j| train[j].0.clone()).collect(),
                lambda: w.lambda.clone(),
                t: w.t,
                min_jacobian: None,
                error: None,
            };
            let sample = if skip_registration {
                identity_sample(image.grid(), w.lambda.clone(), w.t)
            } else {
                let mut momenta = Vec::new();
                let mut provenance = Vec::new();
                for j in &w.targets {
                    match &regs[j] {
                        Ok(e) => {
                            momenta.push(e.m0.clone());
                            provenance.push(e.provenance.clone());
                        }
                        Err(f) => {
                            diag.error = Some(format!("{}: {}", f.code, f.message));
                            return Ok((diag, None));
                        }
                    }
                }
                let set = MomentumSet::new(test_id.to_string(), momenta, provenance)?;
                match sample_at(&set, &w.lambda, w.t, &cfg.shoot) {
                    Ok(s) => s,
                    Err(e) => {
                        diag.error = Some(format!("{}: {e}", e.code()));
                        return Ok((diag, None));
                    }
                }
            };
            diag.lambda = sample.lambda.clone();
            diag.min_jacobian = Some(check_fold(&sample.phi_inv, || format!("test view {} of {test_id}", w.v))?);
            let warped = image.interpolate(&sample.phi_inv)?;
            let soft = match seg.segment(&warped) {
                Ok(s) => s,
                Err(e) => {
                    diag.error = Some(format!("{}: {e}", e.code()));
                    return Ok((diag, None));
                }
            };
            warped.grid().check_same(soft.grid(), "segmenter output")?;
            let back = soft.interpolate(&sample.phi)?;
            Ok((diag, Some(back)))
        })
        .collect::<Result<_>>()?;

    let mut diags = Vec::with_capacity(results.len());
    let mut softs = Vec::new();
    for (d, s) in results {
        diags.push(d);
        softs.extend(s);
    }
    if softs.is_empty() {
        return Err(Error::Pipeline(format!("no view of {test_id} survived")));
    }
    let fused = fuse(&softs)?;
    Ok(TestOutput { labels: fused.argmax(), fused, views: diags })
}

// ---------------------------------------------------------------------------
// Atlas segmenter

/// Toy segmenter: registers the atlas to the input and warps its labels.
#[derive(Debug, Clone)]
pub struct AtlasSegmenter {
    atlas: ScalarField,
    labels: LabelMap,
    reg: RegConfig,
    confidence: f64,
}

pub fn atlas_segmenter(atlas: &ScalarField, atlas_labels: &LabelMap, reg: &RegConfig) -> Result<AtlasSegmenter> {
    atlas.grid().check_same(atlas_labels.grid(), "atlas")?;
    reg.validate()?;
    Ok(AtlasSegmenter { atlas: atlas.clone(), labels: atlas_labels.clone(), reg: reg.clone(), confidence: 0.99 })
}

impl Segmenter for AtlasSegmenter {
    fn segment(&self, image: &ScalarField) -> Result<SoftLabelField> {
        self.atlas.grid().check_same(image.grid(), "segmenter input")?;
        let r = register(&self.atlas, image, &self.reg)?;
        let map = shoot(&r.m0, 1.0, &self.reg.shoot)?.phi_inv;
        let hard = warp_labels(&self.labels, &map)?;
        Ok(SoftLabelField::from_labels(&hard, self.confidence))
    }
}

// ---------------------------------------------------------------------------
// B-spline baseline

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BSplineSetting {
    /// Control points per axis.
    pub control_points: usize,
    /// Displacement standard deviation in mm.
    pub std_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BSplineConfig {
    pub settings: Vec<BSplineSetting>,
    pub rng_seed: u64,
}

impl BSplineConfig {
    /// Meshes of 10, 10 and 20 points per axis with standard deviations 3, 4
    /// and 2 mm, for either dimensionality.
    pub fn default_settings(rng_seed: u64) -> Self {
        let s = |control_points, std_mm| BSplineSetting { control_points, std_mm };
        BSplineConfig { settings: vec![s(10, 3.0), s(10, 4.0), s(20, 2.0)], rng_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() {
            return Err(Error::InvalidConfig("no B-spline settings".into()));
        }
        for s in &self.settings {
            if s.control_points < 2 || !(s.std_mm >= 0.0 && s.std_mm.is_finite()) {
                return Err(Error::InvalidConfig(format!("bad B-spline setting {s:?}")));
            }
        }
        Ok(())
    }
}

fn cubic_bspline(u: f64) -> f64 {
    let s = u.abs();
    if s < 1.0 {
        (4.0 - 6.0 * s * s + 3.0 * s * s * s) / 6.0
    } else if s < 2.0 {
        let r = 2.0 - s;
        r * r * r / 6.0
    } else {
        0.0
    }
}

/// Contracts axis `axis` of `data` (shape `shape`, x fastest) with `mat`
/// (`rows x shape[axis]`, row-major).
fn contract_axis(data: &[f64], shape: [usize; 3], axis: usize, mat: &[f64], rows: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = rows;
    let cols = shape[axis];
    let stride_in: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; out_shape.iter().product()];
    let outer: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for r in 0..rows {
            let row = &mat[r * cols..(r + 1) * cols];
            for inner in 0..stride_in {
                let mut acc = 0.0;
                for (c, &w) in row.iter().enumerate() {
                    if w != 0.0 {
                        acc += w * data[inner + stride_in * (c + cols * o)];
                    }
                }
                out[inner + stride_in * (r + rows * o)] = acc;
            }
        }
    }
    (out, out_shape)
}

/// Cubic B-spline displacement from a uniform control mesh spanning the grid,
/// with i.i.d. normal control displacements.
pub fn bspline_displacement<R: Rng + ?Sized>(grid: &GridSpec, setting: BSplineSetting, rng: &mut R) -> Result<VectorField> {
    let d = grid.ndim();
    let nc = setting.control_points;
    if nc < 2 {
        return Err(Error::InvalidConfig("need at least 2 control points per axis".into()));
    }
    let normal = Normal::new(0.0, setting.std_mm).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut cshape = [1usize; 3];
    cshape[..d].fill(nc);
    let ncp: usize = cshape.iter().product();
    let dims = grid.dims();
    let mats: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let n = dims[a];
            let delta = (n - 1) as f64 / (nc - 1) as f64;
            let mut m = vec![0.0; n * nc];
            for i in 0..n {
                for k in 0..nc {
                    m[i * nc + k] = cubic_bspline(i as f64 / delta - k as f64);
                }
            }
            m
        })
        .collect();
    let mut comps = Vec::with_capacity(d);
    for _ in 0..d {
        let mut data: Vec<f64> = (0..ncp).map(|_| normal.sample(rng)).collect();
        let mut shape = cshape;
        for a in 0..d {
            let (next, s) = contract_axis(&data, shape, a, &mats[a], dims[a]);
            data = next;
            shape = s;
        }
        comps.push(data);
    }
    VectorField::new(grid.clone(), comps)
}

/// Random B-spline deformations of randomly chosen subjects. Example `i` uses
/// RNG stream `i`. Folds are recorded in the lineage, not rejected.
pub fn bspline_augment(dataset: &[Subject], n_out: usize, cfg: &BSplineConfig) -> Result<Vec<AugmentedExample>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    (0..n_out as u64)
        .into_par_iter()
        .map(|stream| {
            let mut rng = stream_rng(cfg.rng_seed, stream);
            let src = &dataset[rng.random_range(0..dataset.len())];
            let setting = cfg.settings[rng.random_range(0..cfg.settings.len())];
            let u = bspline_displacement(src.image.grid(), setting, &mut rng)?;
            let map = DeformationMap::from_displacement(&u);
            Ok(AugmentedExample {
                image: src.image.interpolate(&map)?,
                labels: warp_labels(&src.labels, &map)?,
                lineage: Lineage {
                    pipeline: PipelineTag::Bspline,
                    source_id: src.id.clone(),
                    target_ids: vec![],
                    appearance_id: None,
                    lambda: vec![],
                    t: 0.0,
                    seed: cfg.rng_seed,
                    stream,
                    bspline: Some(setting),
                    min_jacobian: min_jacobian_determinant(&map),
                },
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// One-shot synthesis

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OneShotVariant {
    /// Sampled subspace momentum and time.
    FluidAugReal,
    /// Sampled subspace momentum at `t = 1`.
    FluidAugRealT1,
    /// Raw registration geometry of one unlabeled image.
    BrainstormReal,
}

impl OneShotVariant {
    fn tag(self) -> PipelineTag {
        match self {
            OneShotVariant::FluidAugReal => PipelineTag::FluidAugReal,
            OneShotVariant::FluidAugRealT1 => PipelineTag::FluidAugRealT1,
            OneShotVariant::BrainstormReal => PipelineTag::BrainstormReal,
        }
    }
}

/// Registrations and maps shared by all one-shot outputs.
///
/// Conventions: registering `X -> Y` yields `phi_inv` with
/// `X ∘ phi_inv ≈ Y`. Appearance transfer uses the `I_i -> A` registration,
/// so `I_i ∘ phi_inv` lives in atlas space. Brainstorm geometry for donor `j`
/// is the forward map of the `I_j -> A` registration, the exact inverse of its
/// `phi_inv`, so `A ∘ phi ≈ I_j`.
#[derive(Debug)]
pub struct OneShotContext {
    atlas: Subject,
    ids: Vec<String>,
    /// `I_i -> A` inverse maps (appearance) and forward maps (Brainstorm geometry).
    to_atlas: Vec<Option<(DeformationMap, DeformationMap)>>,
    /// `A -> I_j` momenta.
    from_atlas: Vec<Option<Arc<CachedRegistration>>>,
    images: Vec<ScalarField>,
    variant: OneShotVariant,
    cfg: SamplerConfig,
    pub failures: Vec<PairFailure>,
}

impl OneShotContext {
    pub fn prepare(
        atlas: &Subject,
        unlabeled: &[(String, ScalarField)],
        cfg: &SamplerConfig,
        reg: &RegConfig,
        variant: OneShotVariant,
        cache: &MomentumCache,
    ) -> Result<Self> {
        cfg.validate()?;
        reg.validate()?;
        if unlabeled.is_empty() {
            return Err(Error::Empty("unlabeled images"));
        }
        check_unique_ids(unlabeled.iter().map(|(id, _)| id.as_str()))?;
        check_one_grid(atlas.image.grid(), unlabeled.iter().map(|(_, im)| im.grid()))?;

        let a = (atlas.id.as_str(), &atlas.image);
        let mut pairs: Vec<_> = unlabeled.iter().map(|(id, im)| (id.as_str(), im, a.0, a.1)).collect();
        if variant != OneShotVariant::BrainstormReal {
            pairs.extend(unlabeled.iter().map(|(id, im)| (a.0, a.1, id.as_str(), im)));
        }
        let mut results = register_pairs(&pairs, reg, cache).into_iter();
        let mut failures = Vec::new();
        let mut take = |r: Result<Arc<CachedRegistration>, PairFailure>| match r {
            Ok(e) => Some(e),
            Err(f) => {
                failures.push(f);
                None
            }
        };
        let inbound: Vec<_> = results.by_ref().take(unlabeled.len()).map(&mut take).collect();
        let from_atlas: Vec<_> = results.map(&mut take).collect();

        let shoot_cfg = &reg.shoot;
        let to_atlas = inbound
            .par_iter()
            .map(|e| match e {
                Some(e) => shoot(&e.m0, 1.0, shoot_cfg).map(|s| Some((s.phi_inv, s.phi))),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let from_atlas = if from_atlas.is_empty() { vec![None; unlabeled.len()] } else { from_atlas };

        Ok(OneShotContext {
            atlas: atlas.clone(),
            ids: unlabeled.iter().map(|(id, _)| id.clone()).collect(),
            to_atlas,
            from_atlas,
            images: unlabeled.iter().map(|(_, im)| im.clone()).collect(),
            variant,
            cfg: cfg.clone(),
            failures,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn index_of(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Pipeline(format!("unknown unlabeled image {id:?}")))
    }

    fn appearance_donors(&self) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.to_atlas[i].is_some()).collect()
    }

    fn geometry_donors(&self) -> Vec<usize> {
        match self.variant {
            OneShotVariant::BrainstormReal => self.appearance_donors(),
            _ => (0..self.ids.len()).filter(|&j| self.from_atlas[j].is_some()).collect(),
        }
    }

    /// One example from explicit choices. `geometry[0]` is the donor `j`; for
    /// the fluid variants the rest complete the momentum set.
    pub fn synthesize(&self, appearance: usize, geometry: &[usize], lambda: &[f64], t: f64, stream: u64) -> Result<AugmentedExample> {
        let (psi, _) = self.to_atlas[appearance]
            .as_ref()
            .ok_or_else(|| Error::Pipeline(format!("no atlas registration for {}", self.ids[appearance])))?;
        let (geom, lambda, t) = match self.variant {
            OneShotVariant::BrainstormReal => {
                let j = *geometry.first().ok_or(Error::Empty("geometry donors"))?;
                let (_, phi) = self.to_atlas[j]
                    .as_ref()
                    .ok_or_else(|| Error::Pipeline(format!("no atlas registration for {}", self.ids[j])))?;
                (phi.clone(), vec![1.0], 1.0)
            }
            _ => {
                let set = self.momentum_set(geometry)?;
                let s = sample_at(&set, lambda, t, &self.cfg.shoot)?;
                (s.phi_inv, s.lambda, t)
            }
        };
        let min_det = check_fold(&geom, || {
            format!("one-shot geometry {:?} lambda={lambda:?} t={t}", geometry.iter().map(|&j| &self.ids[j]).collect::<Vec<_>>())
        })?;
        let total = compose_maps(psi, &geom)?;
        Ok(AugmentedExample {
            image: self.images[appearance].interpolate(&total)?,
            labels: warp_labels(&self.atlas.labels, &geom)?,
            lineage: Lineage {
                pipeline: self.variant.tag(),
                source_id: self.atlas.id.clone(),
                target_ids: geometry.iter().map(|&j| self.ids[j].clone()).collect(),
                appearance_id: Some(self.ids[appearance].clone()),
                lambda,
                t,
                seed: self.cfg.rng_seed,
                stream,
                bspline: None,
                min_jacobian: min_det,
            },
        })
    }

    fn momentum_set(&self, geometry: &[usize]) -> Result<MomentumSet> {
        let mut momenta = Vec::new();
        let mut provenance = Vec::new();
        for &j in geometry {
            let e = self.from_atlas[j]
                .as_ref()
                .ok_or_else(|| Error::Pipeline(format!("no registration atlas -> {}", self.ids[j])))?;
            momenta.push(e.m0.clone());
            provenance.push(e.provenance.clone());
        }
        MomentumSet::new(self.atlas.id.clone(), momenta, provenance)
    }

    /// `n_out` examples; example `i` uses RNG stream `i`.
    pub fn generate(&self, n_out: usize) -> Result<Vec<AugmentedExample>> {
        let app = self.appearance_donors();
        let geo = self.geometry_donors();
        if app.is_empty() || geo.is_empty() {
            return Err(Error::Pipeline("every registration failed".into()));
        }
        let k = match self.variant {
            OneShotVariant::BrainstormReal => 1,
            _ => self.cfg.k,
        };
        if geo.len() < k {
            return Err(Error::InvalidConfig(format!("{} geometry donors cannot support K = {k}", geo.len())));
        }
        (0..n_out as u64)
            .into_par_iter()
            .map(|stream| {
                let mut rng = stream_rng(self.cfg.rng_seed, stream);
                let i = app[rng.random_range(0..app.len())];
                let j = geo[rng.random_range(0..geo.len())];
                let rest: Vec<usize> = geo.iter().copied().filter(|&x| x != j).collect();
                let mut geometry = vec![j];
                geometry.extend(pick_distinct(&mut rng, &rest, k - 1));
                let lambda = sample_lambda(k, &mut rng)?;
                let t = match self.variant {
                    OneShotVariant::FluidAugReal => sample_t(&self.cfg, &mut rng),
                    _ => 1.0,
                };
                self.synthesize(i, &geometry, &lambda, t, stream)
            })
            .collect()
    }

    /// Rebuilds an example from its lineage.
    pub fn replay(&self, lineage: &Lineage) -> Result<AugmentedExample> {
        let app = self.index_of(lineage.appearance_id.as_deref().unwrap_or_default())?;
        let geometry = lineage.target_ids.iter().map(|id| self.index_of(id)).collect::<Result<Vec<_>>>()?;
        let (psi, _) = self.to_atlas[app].as_ref().ok_or_else(|| Error::Pipeline("missing appearance map".into()))?;
        let geom = match self.variant {
            OneShotVariant::BrainstormReal => self.to_atlas[geometry[0]].as_ref().unwrap().1.clone(),
            _ => sample_normalized(&self.momentum_set(&geometry)?, lineage.lambda.clone(), lineage.t, &self.cfg.shoot)?.phi_inv,
        };
        let total = compose_maps(psi, &geom)?;
        Ok(AugmentedExample {
            image: self.images[app].interpolate(&total)?,
            labels: warp_labels(&self.atlas.labels, &geom)?,
            lineage: lineage.clone(),
        })
    }
}

/// One-shot synthesis with atlas labels only.
pub fn oneshot_synthesize(
    atlas: &Subject,
    unlabeled: &[(String, ScalarField)],
    n_out: usize,
    cfg: &SamplerConfig,
    reg: &RegConfig,
    variant: OneShotVariant,
    cache: &MomentumCache,
) -> Result<PipelineOutput> {
    let ctx = OneShotContext::prepare(atlas, unlabeled, cfg, reg, variant, cache)?;
    let examples = ctx.generate(n_out)?;
    Ok(PipelineOutput { examples, failures: ctx.failures, dropped: vec![] })
}

/// In-memory cache, or one persisted under `dir`.
pub fn open_cache(dir: Option<&Path>) -> Result<MomentumCache> {
    match dir {
        Some(d) => MomentumCache::on_disk(d),
        None => Ok(MomentumCache::in_memory()),
    }
}
