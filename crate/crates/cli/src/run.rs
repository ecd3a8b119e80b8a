//! Subcommand bodies. Each writes into `out` and returns the input paths to
//! record in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geoflow_core::augment::PipelineOutput;
use geoflow_core::io::config::Resolved;
use geoflow_core::io::{self, read_dataset, read_field, write_dataset, AnyField, RunConfig, Slice};
use geoflow_core::subspace::MomentumProvenance;
use geoflow_core::{
    atlas_segmenter, augment_test, augment_train, bspline_augment, dice, draw_sample, generate_population,
    inner_product, jacobian_determinant, oneshot_synthesize, register, sample_at, shoot_sequence, warp_labels,
    AugmentedExample, DeformationMap, Error, GridSpec, Interpolate, LabelMap, MomentumCache, MomentumSet,
    ScalarField, Subject, VectorField,
};
use serde::Serialize;
use serde_json::json;

use crate::Command;

pub fn run(command: &Command, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    match command {
        Command::Gen(a) => gen(&a.prefix, cfg, out),
        Command::Register(a) => register_pair(&a.source, &a.target, cfg, out),
        Command::Shoot(a) => shoot(a, cfg, out),
        Command::Subspace(a) => subspace(a, cfg, out),
        Command::AugmentTrain(a) => {
            let subjects = subjects(&a.dataset)?;
            let r = resolve(cfg, subjects[0].image.grid())?;
            let res = augment_train(&subjects, cfg.pipeline.n_out, &r.sampler, &r.reg, &cache(cfg)?)?;
            write_pipeline(out, &res)?;
            Ok(vec![a.dataset.clone()])
        }
        Command::AugmentTest(a) => test_time(a, cfg, out),
        Command::Oneshot(a) => {
            let data = read_dataset(&a.dataset)?;
            let atlas = pick(&data, a.atlas_id.as_deref())?.clone().into_subject()?;
            let unlabeled: Vec<_> = data.iter().map(|d| (d.id.clone(), d.image.clone())).collect();
            let r = resolve(cfg, atlas.image.grid())?;
            let res = oneshot_synthesize(&atlas, &unlabeled, cfg.pipeline.n_out, &r.sampler, &r.reg, cfg.pipeline.variant, &cache(cfg)?)?;
            write_pipeline(out, &res)?;
            Ok(vec![a.dataset.clone()])
        }
        Command::Bspline(a) => {
            let subjects = subjects(&a.dataset)?;
            let r = resolve(cfg, subjects[0].image.grid())?;
            let examples = bspline_augment(&subjects, cfg.pipeline.n_out, &r.bspline)?;
            write_pipeline(out, &PipelineOutput { examples, failures: vec![], dropped: vec![] })?;
            Ok(vec![a.dataset.clone()])
        }
        Command::Jacobian(a) => {
            let map: DeformationMap = read_field(&a.map)?;
            let det = jacobian_determinant(&map);
            let folded = det.values().iter().filter(|&&d| d <= 0.0).count();
            io::write_field(out.join("jacobian.gf"), &det)?;
            write_json(&out.join("jacobian.json"), &json!({ "min": det.min(), "max": det.max(), "folded_points": folded }))?;
            println!("min jacobian determinant {:.6}, {folded} folded points", det.min());
            Ok(vec![a.map.clone()])
        }
        Command::Dice(a) => dice_cmd(&a.a, &a.b, out),
        Command::Export(a) => {
            let slice = a.axis.zip(a.slice).map(|(axis, index)| Slice { axis, index });
            let stem = a.input.file_stem().unwrap_or_default().to_string_lossy();
            let png = out.join(format!("{stem}.png"));
            match io::read_any(&a.input)? {
                AnyField::Scalar(f) => io::export_scalar_png(&f, &png, slice)?,
                AnyField::Labels(l) => io::export_labels_png(&l, &png, slice)?,
                _ => bail!(Error::Export("only scalar and label fields export as images".into())),
            }
            Ok(vec![a.input.clone()])
        }
        Command::Replay(_) => unreachable!("replay is handled before dispatch"),
    }
}

fn resolve(cfg: &RunConfig, grid: &GridSpec) -> Result<Resolved> {
    Ok(cfg.resolve(grid)?)
}

fn cache(cfg: &RunConfig) -> Result<MomentumCache> {
    Ok(geoflow_core::augment::open_cache(cfg.cache_dir.as_deref())?)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn subjects(dir: &Path) -> Result<Vec<Subject>> {
    let data = read_dataset(dir)?;
    if data.is_empty() {
        bail!(Error::Empty("dataset"));
    }
    Ok(data.into_iter().map(|d| d.into_subject()).collect::<geoflow_core::Result<_>>()?)
}

fn pick<'a>(data: &'a [io::LoadedImage], id: Option<&str>) -> Result<&'a io::LoadedImage> {
    match id {
        Some(id) => data
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no dataset entry {id:?}")).into()),
        None => data.first().ok_or_else(|| Error::Empty("dataset").into()),
    }
}

fn time_tag(t: f64) -> String {
    format!("t{t:+.3}")
}

fn gen(prefix: &str, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let base = cfg.data.base_scene(cfg.seed)?;
    let pop = generate_population(&base, cfg.data.count, &cfg.data.scales, cfg.seed)?;
    let items: Vec<_> = pop
        .iter()
        .enumerate()
        .map(|(i, (im, l))| (format!("{prefix}{i:02}"), im, Some(l), None))
        .collect();
    write_dataset(out, &items)?;
    write_json(&out.join("scene.json"), &base)?;
    println!("wrote {} images", items.len());
    Ok(vec![])
}

fn register_pair(source: &Path, target: &Path, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let i0: ScalarField = read_field(source)?;
    let i1: ScalarField = read_field(target)?;
    let r = resolve(cfg, i0.grid())?;
    let res = register(&i0, &i1, &r.reg)?;
    io::write_field(out.join("m0.gf"), &res.m0)?;
    io::write_field(out.join("warped.gf"), &res.final_warped)?;

    let initial = i0.ssd(&i1)?;
    let fin = res.final_warped.ssd(&i1)?;
    let norm = res.m0.l2_norm() * i0.grid().voxel_volume().sqrt();
    let tol = r.reg.optimizer.grad_tol;
    write_json(
        &out.join("registration.json"),
        &json!({
            "initial_ssd": initial,
            "final_ssd": fin,
            "ssd_ratio": if initial > 0.0 { fin / initial } else { 0.0 },
            "final_energy": {
                "total": res.final_energy.total,
                "regularity": res.final_energy.regularity,
                "similarity": res.final_energy.similarity,
            },
            "momentum_norm": norm,
            "momentum_tolerance": tol,
            "momentum_below_tolerance": norm < tol,
            "convergence": res.converged,
            "energy_trace": res.energy_trace,
        }),
    )?;
    if norm < tol {
        println!("momentum norm {norm:.3e} below tolerance {tol:.1e}");
    } else {
        println!("ssd ratio {:.4}, momentum norm {norm:.4e}", if initial > 0.0 { fin / initial } else { 0.0 });
    }
    Ok(vec![source.to_path_buf(), target.to_path_buf()])
}

fn shoot(a: &crate::ShootArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let m0: VectorField = read_field(&a.momentum)?;
    let r = resolve(cfg, m0.grid())?;
    let image: Option<ScalarField> = a.image.as_ref().map(read_field).transpose()?;
    let labels: Option<LabelMap> = a.labels.as_ref().map(read_field).transpose()?;
    let mut ts = a.t.clone();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let states = shoot_sequence(&m0, &ts, &r.shoot)?;
    let mut report = Vec::new();
    for s in &states {
        let tag = time_tag(s.t);
        io::write_field(out.join(format!("{tag}_phi_inv.gf")), &s.phi_inv)?;
        io::write_field(out.join(format!("{tag}_phi.gf")), &s.phi)?;
        if let Some(im) = &image {
            io::write_field(out.join(format!("{tag}_warped.gf")), &im.interpolate(&s.phi_inv)?)?;
        }
        if let Some(l) = &labels {
            io::write_field(out.join(format!("{tag}_labels.gf")), &warp_labels(l, &s.phi_inv)?)?;
        }
        report.push(json!({
            "t": s.t,
            "min_jacobian_phi_inv": jacobian_determinant(&s.phi_inv).min(),
            "energy": inner_product(&s.m, &s.v)?,
        }));
    }
    write_json(&out.join("shoot.json"), &report)?;
    let mut inputs = vec![a.momentum.clone()];
    inputs.extend(a.image.clone());
    inputs.extend(a.labels.clone());
    Ok(inputs)
}

fn subspace(a: &crate::SubspaceArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let momenta = a.momenta.iter().map(read_field).collect::<geoflow_core::Result<Vec<VectorField>>>()?;
    let provenance = a
        .momenta
        .iter()
        .map(|p| MomentumProvenance::external(&p.file_stem().unwrap_or_default().to_string_lossy()))
        .collect();
    let source: Option<ScalarField> = a.source.as_ref().map(read_field).transpose()?;
    let source_id = a
        .source
        .as_ref()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .unwrap_or_else(|| "source".into());
    let set = MomentumSet::new(source_id, momenta, provenance)?;
    let r = resolve(cfg, set.momenta()[0].grid())?;
    let mut sampler = r.sampler.clone();
    sampler.k = set.len();

    let mut records = Vec::new();
    for i in 0..a.samples as u64 {
        let s = draw_sample(&set, &sampler, i)?;
        io::write_field(out.join(format!("sample{i:04}_phi_inv.gf")), &s.phi_inv)?;
        if let Some(im) = &source {
            io::write_field(out.join(format!("sample{i:04}_warped.gf")), &im.interpolate(&s.phi_inv)?)?;
        }
        records.push(json!({
            "index": i,
            "lambda": s.lambda,
            "t": s.t,
            "seed": sampler.rng_seed,
            "stream": i,
            "min_jacobian": jacobian_determinant(&s.phi_inv).min(),
        }));
    }
    write_json(&out.join("samples.json"), &records)?;

    if a.panel {
        let Some(im) = &source else { bail!(Error::InvalidConfig("--panel needs --source".into())) };
        if set.len() != 2 {
            bail!(Error::InvalidConfig("--panel needs exactly two momenta".into()));
        }
        let mut cells = Vec::new();
        for l1 in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for &t in &a.panel_t {
                let s = sample_at(&set, &[l1, 1.0 - l1], t, &r.shoot)?;
                cells.push((l1, t, im.interpolate(&s.phi_inv)?));
            }
        }
        io::export_panel(&cells, &out.join("panel"), "warp", None)?;
    }
    let mut inputs = a.momenta.clone();
    inputs.extend(a.source.clone());
    Ok(inputs)
}

fn write_examples(dir: &Path, examples: &[AugmentedExample]) -> Result<()> {
    let items: Vec<_> = examples
        .iter()
        .map(|e| {
            let meta = serde_json::to_value(&e.lineage).expect("lineage serializes");
            (format!("aug{:04}", e.lineage.stream), &e.image, Some(&e.labels), Some(meta))
        })
        .collect();
    write_dataset(dir, &items)?;
    Ok(())
}

fn write_pipeline(out: &Path, res: &PipelineOutput) -> Result<()> {
    write_examples(&out.join("examples"), &res.examples)?;
    let min_det = res.examples.iter().map(|e| e.lineage.min_jacobian).fold(f64::INFINITY, f64::min);
    write_json(
        &out.join("report.json"),
        &json!({
            "produced": res.examples.len(),
            "min_jacobian": if res.examples.is_empty() { None } else { Some(min_det) },
            "failures": res.failures,
            "dropped": res.dropped,
        }),
    )?;
    println!("{} examples, {} failed registrations", res.examples.len(), res.failures.len());
    Ok(())
}

fn test_time(a: &crate::AugmentTestArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let train = read_dataset(&a.train)?;
    let test = read_dataset(&a.test)?;
    let atlas = pick(&train, a.atlas_id.as_deref())?.clone().into_subject()?;
    let r = resolve(cfg, atlas.image.grid())?;
    let seg = atlas_segmenter(&atlas.image, &atlas.labels, &r.reg)?;
    let train_images: Vec<_> = train.iter().map(|d| (d.id.clone(), d.image.clone())).collect();
    let cache = cache(cfg)?;

    let mut predictions = Vec::new();
    let mut views = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for d in &test {
        let res = augment_test(&d.id, &d.image, &train_images, &seg, cfg.pipeline.n_views, &r.sampler, &r.reg, &cache)?;
        if let Some(truth) = &d.labels {
            scores.insert(d.id.clone(), dice(&res.labels, truth)?);
        }
        views.insert(d.id.clone(), res.views);
        predictions.push((d.id.clone(), res.labels));
    }
    let items: Vec<_> = test
        .iter()
        .zip(&predictions)
        .map(|(d, (id, l))| (id.clone(), &d.image, Some(l), None))
        .collect();
    write_dataset(&out.join("predictions"), &items)?;
    write_json(&out.join("views.json"), &views)?;
    let mean = mean_dice(scores.values().map(|s| s.mean));
    write_json(&out.join("report.json"), &json!({ "dice": scores, "mean_dice": mean }))?;
    if let Some(m) = mean {
        println!("mean fused dice {m:.4}");
    }
    Ok(vec![a.train.clone(), a.test.clone()])
}

fn mean_dice(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn dice_cmd(a: &Path, b: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let mut scores = BTreeMap::new();
    if a.is_dir() && b.is_dir() {
        let da = read_dataset(a)?;
        let db = read_dataset(b)?;
        for x in &da {
            let (Some(la), Some(lb)) = (&x.labels, db.iter().find(|y| y.id == x.id).and_then(|y| y.labels.as_ref())) else {
                continue;
            };
            scores.insert(x.id.clone(), dice(la, lb)?);
        }
        if scores.is_empty() {
            bail!(Error::Empty("labeled entries shared by both datasets"));
        }
    } else {
        let la: LabelMap = read_field(a)?;
        let lb: LabelMap = read_field(b)?;
        scores.insert("pair".to_string(), dice(&la, &lb)?);
    }
    let mean = mean_dice(scores.values().map(|s| s.mean));
    write_json(&out.join("dice.json"), &json!({ "dice": scores, "mean_dice": mean }))?;
    println!("mean dice {:.4}", mean.unwrap_or(f64::NAN));
    Ok(vec![a.to_path_buf(), b.to_path_buf()])
}
