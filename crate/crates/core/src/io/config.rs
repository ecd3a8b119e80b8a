//! TOML run configuration. Every section is optional; unknown keys are
//! rejected. Kernel widths may be given relative to the grid extent, so the
//! concrete configs are resolved against a grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{BSplineConfig, BSplineSetting, OneShotVariant};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::kernel::{GaussianComponent, KernelSpec};
use crate::registration::{OptimizerConfig, RegConfig, ScaleLevel, Similarity};
use crate::shooting::ShootConfig;
use crate::subspace::SamplerConfig;
use crate::synthdata::{PerturbationScales, ShapeSceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelConfig {
    /// Sigmas as fractions of the grid extent; equal weights when omitted.
    Relative {
        fractions: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// Sigmas in mm.
    Absolute { components: Vec<GaussianComponent> },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Relative { fractions: vec![0.05, 0.1, 0.15], weights: None }
    }
}

impl KernelConfig {
    pub fn resolve(&self, grid: &GridSpec) -> Result<KernelSpec> {
        match self {
            KernelConfig::Relative { fractions, weights } => {
                let w = weights.clone().unwrap_or_else(|| vec![1.0 / fractions.len().max(1) as f64; fractions.len()]);
                KernelSpec::relative(grid, fractions, &w)
            }
            KernelConfig::Absolute { components } => KernelSpec::new(components.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShootSection {
    pub steps_per_unit_time: usize,
}

impl Default for ShootSection {
    fn default() -> Self {
        ShootSection { steps_per_unit_time: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSection {
    pub similarity: Similarity,
    pub sim_weight: f64,
    pub optimizer: OptimizerConfig,
    pub multiscale: Vec<ScaleLevel>,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        let g = GridSpec::unit(&[2, 2]).expect("valid grid");
        let r = RegConfig::default_for_grid(&g);
        RegistrationSection { similarity: r.similarity, sim_weight: r.sim_weight, optimizer: r.optimizer, multiscale: r.multiscale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub t_range: [f64; 2],
    pub k: usize,
    /// Defaults to the global seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { t_range: [-1.0, 2.0], k: 2, rng_seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub n_out: usize,
    pub n_views: usize,
    pub variant: OneShotVariant,
    pub bspline: Vec<BSplineSetting>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            n_out: 50,
            n_views: 20,
            variant: OneShotVariant::FluidAugReal,
            bspline: BSplineConfig::default_settings(0).settings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Scene to perturb; the built-in three-structure scene when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<ShapeSceneSpec>,
    /// Grid points per axis of the built-in scene.
    pub size: usize,
    pub count: usize,
    pub noise: f64,
    pub scales: PerturbationScales,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { scene: None, size: 64, count: 10, noise: 0.0, scales: PerturbationScales::default() }
    }
}

impl DataSection {
    pub fn base_scene(&self, seed: u64) -> Result<ShapeSceneSpec> {
        let mut s = match &self.scene {
            Some(s) => s.clone(),
            None => ShapeSceneSpec::default_2d(self.size)?,
        };
        if self.scene.is_none() {
            s.noise = self.noise;
        }
        s.rng_seed = seed;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Persistent registration cache.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub kernel: KernelConfig,
    pub shoot: ShootSection,
    pub registration: RegistrationSection,
    pub sampler: SamplerSection,
    pub pipeline: PipelineSection,
    pub data: DataSection,
}

/// Concrete configs for one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub shoot: ShootConfig,
    pub reg: RegConfig,
    pub sampler: SamplerConfig,
    pub bspline: BSplineConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form, hex.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn resolve(&self, grid: &GridSpec) -> Result<Resolved> {
        let kernel = self.kernel.resolve(grid)?;
        let shoot = ShootConfig::new(self.shoot.steps_per_unit_time, kernel)?;
        let r = &self.registration;
        let reg = RegConfig {
            similarity: r.similarity,
            sim_weight: r.sim_weight,
            shoot: shoot.clone(),
            optimizer: r.optimizer.clone(),
            multiscale: r.multiscale.clone(),
        };
        reg.validate()?;
        let sampler = SamplerConfig {
            t_range: self.sampler.t_range,
            k: self.sampler.k,
            rng_seed: self.sampler.rng_seed.unwrap_or(self.seed),
            shoot: shoot.clone(),
        };
        sampler.validate()?;
        let bspline = BSplineConfig { settings: self.pipeline.bspline.clone(), rng_seed: self.seed };
        bspline.validate()?;
        Ok(Resolved { shoot, reg, sampler, bspline })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.sampler.k, 2);
        assert_eq!(c.sampler.t_range, [-1.0, 2.0]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[sampler]\nK = 2").is_err());
        assert!(RunConfig::from_toml("[registration.optimizer]\nmax_iter = 2").is_err());
    }

    #[test]
    fn paper_scale_settings_accepted() {
        let text = r#"
seed = 7
[sampler]
k = 2
t_range = [-1.0, 2.0]
[pipeline]
n_out = 1500
n_views = 20
variant = "fluid_aug_real_t1"
[kernel]
mode = "absolute"
components = [{ sigma = 2.0, weight = 0.5 }, { sigma = 4.0, weight = 0.5 }]
[registration]
similarity = { kind = "lncc", window = 5 }
"#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.pipeline.n_out, 1500);
        let g = GridSpec::unit(&[32, 32]).unwrap();
        let r = c.resolve(&g).unwrap();
        assert_eq!(r.sampler.rng_seed, 7);
        assert_eq!(r.reg.similarity, Similarity::Lncc { window: 5 });
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 11;
        c.output_dir = Some("out".into());
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn invalid_values_fail_resolution() {
        let c = RunConfig::from_toml("[sampler]\nt_range = [2.0, -1.0]").unwrap();
        assert!(c.resolve(&GridSpec::unit(&[8, 8]).unwrap()).is_err());
    }
}
