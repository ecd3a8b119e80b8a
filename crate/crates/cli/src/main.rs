use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use geoflow_core::io::manifest::MANIFEST_FILE;
use geoflow_core::io::{Manifest, RunConfig};
use geoflow_core::OneShotVariant;
use serde::{Deserialize, Serialize};

mod run;

#[derive(Parser, Debug)]
#[command(name = "geoflow", version, about = "Geodesic shooting, geodesic subspaces and fluid data augmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; created if missing, must not hold a previous run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Persistent registration cache.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Integration steps per unit time.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Synthetic labeled population.
    Gen(GenArgs),
    /// Register a source image to a target image.
    Register(RegisterArgs),
    /// Shoot a momentum to a list of times.
    Shoot(ShootArgs),
    /// Draw samples from the geodesic subspace of a momentum set.
    Subspace(SubspaceArgs),
    /// Training-time augmentation of a labeled dataset.
    AugmentTrain(AugmentTrainArgs),
    /// Test-time augmentation with the atlas segmenter and label fusion.
    AugmentTest(AugmentTestArgs),
    /// One-shot synthesis from a single labeled atlas.
    Oneshot(OneshotArgs),
    /// Random B-spline augmentation baseline.
    Bspline(BsplineArgs),
    /// Jacobian determinant of a deformation map.
    Jacobian(JacobianArgs),
    /// Dice overlap between label maps or dataset directories.
    Dice(DiceArgs),
    /// PNG export of a scalar or label field.
    Export(ExportArgs),
    /// Rerun a recorded run from its manifest and check the outputs.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// Grid points per axis.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Image ids are the prefix plus a two-digit index.
    #[arg(long, default_value = "img")]
    pub prefix: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RegisterArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ShootArgs {
    #[arg(long)]
    pub momentum: PathBuf,
    /// Comma-separated times.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub t: Vec<f64>,
    /// Image to warp.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Label map to warp.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceArgs {
    /// Momentum files sharing one source.
    #[arg(long, num_args = 1.., required = true)]
    pub momenta: Vec<PathBuf>,
    /// Source image to warp with each sample.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, num_args = 2, allow_hyphen_values = true)]
    pub t_range: Option<Vec<f64>>,
    /// Export a lambda x t panel of PNGs (two momenta and a source required).
    #[arg(long)]
    pub panel: bool,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,0,1,2")]
    pub panel_t: Vec<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SamplerOverrides {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, num_args = 2, allow_hyphen_values = true)]
    pub t_range: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AugmentTrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub n_out: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerOverrides,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AugmentTestArgs {
    /// Labeled training dataset; the atlas comes from here.
    #[arg(long)]
    pub train: PathBuf,
    /// Images to segment; their labels, when present, are scored.
    #[arg(long)]
    pub test: PathBuf,
    /// Atlas entry of the training set; the first entry by default.
    #[arg(long)]
    pub atlas_id: Option<String>,
    #[arg(long)]
    pub n_views: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerOverrides,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OneshotArgs {
    /// Dataset whose atlas entry carries labels; every entry is used unlabeled.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub atlas_id: Option<String>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<OneShotVariant>,
    #[arg(long)]
    pub n_out: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerOverrides,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BsplineArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub n_out: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct JacobianArgs {
    #[arg(long)]
    pub map: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DiceArgs {
    /// Label file or dataset directory.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Axis held fixed for 3D fields.
    #[arg(long, requires = "slice")]
    pub axis: Option<usize>,
    #[arg(long, requires = "axis")]
    pub slice: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Manifest file or the directory holding it.
    #[arg(long)]
    pub manifest: PathBuf,
}

fn parse_variant(s: &str) -> Result<OneShotVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| "expected fluid_aug_real, fluid_aug_real_t1 or brainstorm_real".to_string())
}

fn code_of(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<geoflow_core::Error>())
        .map(|e| e.code())
        .unwrap_or("cli")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error: code=usage message={first}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: code={} message={msg}", code_of(&e));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = cli.common;
    if let Command::Replay(r) = &cli.command {
        return replay(r, &common);
    }
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let command = absolutize(cli.command)?;
    apply_overrides(&command, &common, &mut config);
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| geoflow_core::Error::InvalidConfig("no output directory (--out or output_dir)".into()))?;
    execute(&command, &config, &out)
}

fn execute(command: &Command, config: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let invocation = serde_json::to_value(command).expect("command serializes");
    let name = invocation["command"].as_str().unwrap_or_default().to_string();
    let mut manifest = Manifest::new(&name, invocation, config);
    manifest.seeds.insert("global".into(), config.seed);
    manifest.seeds.insert("sampler".into(), config.sampler.rng_seed.unwrap_or(config.seed));
    let inputs = run::run(command, config, out).with_context(|| format!("{name} failed"))?;
    for p in inputs {
        manifest.record_input(&p)?;
    }
    manifest.record_outputs(out)?;
    manifest.write(out)?;
    Ok(())
}

fn prepare_out(out: &Path) -> Result<()> {
    if out.join(MANIFEST_FILE).exists() {
        bail!(geoflow_core::Error::InvalidConfig(format!("{} already holds a run", out.display())));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn replay(r: &ReplayArgs, common: &Common) -> Result<()> {
    if common.config.is_some() || common.seed.is_some() || common.cache_dir.is_some() || common.steps.is_some() {
        bail!(geoflow_core::Error::InvalidConfig("replay takes only --manifest and --out".into()));
    }
    let out = common
        .out
        .as_ref()
        .ok_or_else(|| geoflow_core::Error::InvalidConfig("replay needs --out".into()))?;
    let original = Manifest::read(&r.manifest)?;
    let command: Command = serde_json::from_value(original.invocation.clone())
        .map_err(|e| geoflow_core::Error::InvalidConfig(format!("manifest invocation: {e}")))?;
    for input in &original.inputs {
        let now = geoflow_core::io::manifest::sha256_file(&input.path)?;
        if now != input.sha256 {
            bail!(geoflow_core::Error::Pipeline(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    execute(&command, &original.config, out)?;
    let fresh = Manifest::read(out)?;
    if fresh.outputs != original.outputs {
        let differ: Vec<String> = original
            .outputs
            .iter()
            .filter(|f| !fresh.outputs.contains(f))
            .map(|f| f.path.display().to_string())
            .collect();
        bail!(geoflow_core::Error::Pipeline(format!("replay differs from the recorded run: {}", differ.join(", "))));
    }
    println!("replayed {} outputs bit-exactly", fresh.outputs.len());
    Ok(())
}

fn abs(p: &mut PathBuf) -> Result<()> {
    *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
    Ok(())
}

/// Input paths are recorded absolute so a manifest replays from any directory.
fn absolutize(mut c: Command) -> Result<Command> {
    match &mut c {
        Command::Gen(_) | Command::Replay(_) => {}
        Command::Register(a) => {
            abs(&mut a.source)?;
            abs(&mut a.target)?;
        }
        Command::Shoot(a) => {
            abs(&mut a.momentum)?;
            if let Some(p) = &mut a.image {
                abs(p)?;
            }
            if let Some(p) = &mut a.labels {
                abs(p)?;
            }
        }
        Command::Subspace(a) => {
            for p in &mut a.momenta {
                abs(p)?;
            }
            if let Some(p) = &mut a.source {
                abs(p)?;
            }
        }
        Command::AugmentTrain(a) => abs(&mut a.dataset)?,
        Command::AugmentTest(a) => {
            abs(&mut a.train)?;
            abs(&mut a.test)?;
        }
        Command::Oneshot(a) => abs(&mut a.dataset)?,
        Command::Bspline(a) => abs(&mut a.dataset)?,
        Command::Jacobian(a) => abs(&mut a.map)?,
        Command::Dice(a) => {
            abs(&mut a.a)?;
            abs(&mut a.b)?;
        }
        Command::Export(a) => abs(&mut a.input)?,
    }
    Ok(c)
}

fn apply_sampler(s: &SamplerOverrides, c: &mut RunConfig) {
    if let Some(k) = s.k {
        c.sampler.k = k;
    }
    if let Some(t) = &s.t_range {
        c.sampler.t_range = [t[0], t[1]];
    }
}

fn apply_overrides(command: &Command, common: &Common, c: &mut RunConfig) {
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(d) = &common.cache_dir {
        c.cache_dir = Some(d.clone());
    }
    if let Some(s) = common.steps {
        c.shoot.steps_per_unit_time = s;
    }
    match command {
        Command::Gen(a) => {
            if let Some(n) = a.count {
                c.data.count = n;
            }
            if let Some(n) = a.size {
                c.data.size = n;
            }
            if let Some(x) = a.noise {
                c.data.noise = x;
            }
        }
        Command::Subspace(a) => {
            if let Some(t) = &a.t_range {
                c.sampler.t_range = [t[0], t[1]];
            }
        }
        Command::AugmentTrain(a) => {
            if let Some(n) = a.n_out {
                c.pipeline.n_out = n;
            }
            apply_sampler(&a.sampler, c);
        }
        Command::AugmentTest(a) => {
            if let Some(n) = a.n_views {
                c.pipeline.n_views = n;
            }
            apply_sampler(&a.sampler, c);
        }
        Command::Oneshot(a) => {
            if let Some(n) = a.n_out {
                c.pipeline.n_out = n;
            }
            if let Some(v) = a.variant {
                c.pipeline.variant = v;
            }
            apply_sampler(&a.sampler, c);
        }
        Command::Bspline(a) => {
            if let Some(n) = a.n_out {
                c.pipeline.n_out = n;
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn variant_names() {
        assert_eq!(parse_variant("fluid_aug_real_t1").unwrap(), OneShotVariant::FluidAugRealT1);
        assert_eq!(parse_variant("brainstorm-real").unwrap(), OneShotVariant::BrainstormReal);
        assert!(parse_variant("mixup").is_err());
    }

    #[test]
    fn invocation_round_trips() {
        let c = Command::Shoot(ShootArgs { momentum: "/m.gf".into(), t: vec![-1.0, 2.0], image: None, labels: None });
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["command"], "shoot");
        let back: Command = serde_json::from_value(v).unwrap();
        assert!(matches!(back, Command::Shoot(a) if a.t == vec![-1.0, 2.0]));
    }
}
