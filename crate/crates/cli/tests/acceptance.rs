//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `GEOFLOW_CRITERIA=1,3` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use geoflow_core::augment::{replay_train, CachedRegistration, OneShotContext};
use geoflow_core::subspace::stream_rng;
use geoflow_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const POP_SEED: u64 = 1;
const INTERP_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Registered pairs shared by several criteria. The first `n` images form
/// the synthetic population; the rest are held out for test-time criteria.
struct Population {
    n: usize,
    ids: Vec<String>,
    images: Vec<ScalarField>,
    labels: Vec<LabelMap>,
    reg: RegConfig,
    cache: MomentumCache,
}

impl Population {
    fn new(size: usize, n: usize, held_out: usize) -> Population {
        let count = n + held_out;
        let base = ShapeSceneSpec::default_2d(size).unwrap();
        let pop = generate_population(&base, count, &PerturbationScales::default(), POP_SEED).unwrap();
        let reg = RegConfig::default_for_grid(pop[0].0.grid());
        let (images, labels) = pop.into_iter().unzip();
        Population { n, ids: (0..count).map(|i| format!("img{i:02}")).collect(), images, labels, reg, cache: MomentumCache::in_memory() }
    }

    fn pair(&self, i: usize, j: usize) -> Arc<CachedRegistration> {
        self.cache
            .get_or_register(&self.ids[i], &self.images[i], &self.ids[j], &self.images[j], &self.reg)
            .unwrap()
    }

    fn subjects(&self, range: std::ops::Range<usize>) -> Vec<Subject> {
        range.map(|i| Subject::new(self.ids[i].clone(), self.images[i].clone(), self.labels[i].clone()).unwrap()).collect()
    }
}

fn smooth_random(g: &GridSpec, rng: &mut ChaCha8Rng, amp: f64) -> Vec<f64> {
    let modes: Vec<[f64; 4]> = (0..6)
        .map(|_| [rng.random_range(0.1..0.6), rng.random_range(0.1..0.6), rng.random_range(0.0..6.28), rng.random_range(-1.0..1.0)])
        .collect();
    (0..g.len())
        .map(|i| {
            let p = g.position(i);
            modes.iter().map(|m| m[3] * (m[0] * p[0] + m[1] * p[1] + m[2]).sin()).sum::<f64>() * amp
        })
        .collect()
}

fn disc(n: usize, c: [f64; 2], r: f64) -> ScalarField {
    let spec = ShapeSceneSpec {
        grid: GridSpec::unit(&[n, n]).unwrap(),
        shapes: vec![Shape { kind: ShapeKind::Ellipse, center: c.to_vec(), radii: vec![r, r], label: 1, intensity: 1.0, edge: 2.0 }],
        noise: 0.0,
        rng_seed: 0,
    };
    generate_scene(&spec).unwrap().0
}

fn dot(a: &VectorField, b: &VectorField) -> f64 {
    a.components()
        .iter()
        .zip(b.components())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .sum::<f64>()
        * a.grid().voxel_volume()
}

fn gradient_exactness() -> Outcome {
    let g = GridSpec::unit(&[16, 16]).unwrap();
    let mut cfg = RegConfig::default_for_grid(&g);
    cfg.shoot.steps_per_unit_time = 10;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i0 = ScalarField::new(g.clone(), smooth_random(&g, &mut rng, 0.3)).unwrap();
        let i1 = ScalarField::new(g.clone(), smooth_random(&g, &mut rng, 0.3)).unwrap();
        let m = VectorField::new(g.clone(), vec![smooth_random(&g, &mut rng, 0.3), smooth_random(&g, &mut rng, 0.3)]).unwrap();
        let d = VectorField::new(g.clone(), vec![smooth_random(&g, &mut rng, 1.0), smooth_random(&g, &mut rng, 1.0)]).unwrap();
        let analytic = dot(&energy_gradient(&m, &i0, &i1, &cfg).unwrap(), &d);
        let ep = energy(&m.axpy(h, &d).unwrap(), &i0, &i1, &cfg).unwrap().total;
        let em = energy(&m.axpy(-h, &d).unwrap(), &i0, &i1, &cfg).unwrap().total;
        let fd = (ep - em) / (2.0 * h);
        worst = worst.max((fd - analytic).abs() / analytic.abs());
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 10 instances"))
}

const C2_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

fn conservation(pop: &Population) -> Outcome {
    let ts: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let mut worst: f64 = 0.0;
    for (i, j) in C2_PAIRS {
        let m0 = &pop.pair(i, j).m0;
        let states = shoot_sequence(m0, &ts, &pop.reg.shoot).unwrap();
        let e: Vec<f64> = states.iter().map(|s| inner_product(&s.m, &s.v).unwrap()).collect();
        let (lo, hi) = e.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        worst = worst.max((hi - lo) / e[0].abs());
    }
    outcome(worst < 0.01, format!("max relative variation {worst:.2e} over 5 pairs"))
}

const C3_TIMES: [f64; 6] = [-3.0, -1.0, 0.5, 1.0, 2.0, 4.0];

fn affine_min_det(end: &DeformationMap, t: f64) -> f64 {
    let id = identity_map(end.grid());
    let coords = end
        .coords()
        .iter()
        .zip(id.coords())
        .map(|(e, x)| e.iter().zip(x).map(|(e, x)| (e - x) * t + x).collect())
        .collect();
    min_jacobian_determinant(&DeformationMap::new(end.grid().clone(), coords).unwrap())
}

fn disc_momentum() -> (VectorField, RegConfig) {
    let c = 31.5;
    let a = disc(64, [c, c], 12.0);
    let b = disc(64, [c + 4.0, c], 12.0);
    let cfg = RegConfig::default_for_grid(a.grid());
    (register(&a, &b, &cfg).unwrap().m0, cfg)
}

fn extrapolation(disc_m0: &VectorField, cfg: &RegConfig, pop: &Population) -> Outcome {
    let mut geo = Vec::new();
    for t in C3_TIMES {
        geo.push(match shoot(disc_m0, t, &cfg.shoot) {
            Ok(s) => min_jacobian_determinant(&s.phi_inv),
            Err(_) => f64::NAN,
        });
    }
    let geo_ok = geo.iter().all(|&d| d > 0.0);
    let mut fixtures = vec![("disc", disc_m0.clone(), &cfg.shoot)];
    for (i, j) in C2_PAIRS {
        fixtures.push(("pair", pop.pair(i, j).m0.clone(), &pop.reg.shoot));
    }
    let mut folding = Vec::new();
    for (name, m0, shoot_cfg) in &fixtures {
        let end = shoot(m0, 1.0, shoot_cfg).unwrap().phi_inv;
        let (a, b) = (affine_min_det(&end, -3.0), affine_min_det(&end, 4.0));
        if a < 0.0 || b < 0.0 {
            folding.push(format!("{name} ({a:.2}, {b:.2})"));
        }
    }
    let fmt: Vec<String> = C3_TIMES.iter().zip(&geo).map(|(t, d)| format!("{t}:{d:.2}")).collect();
    outcome(
        geo_ok && !folding.is_empty(),
        format!("geodesic min det [{}]; affine folds on {}", fmt.join(" "), if folding.is_empty() { "none".into() } else { folding.join(", ") }),
    )
}

fn inverse_consistency(disc_m0: &VectorField, cfg: &RegConfig, pop: &Population) -> Outcome {
    let ts = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
    let mut fixtures = vec![(disc_m0.clone(), &cfg.shoot)];
    for (i, j) in C2_PAIRS {
        fixtures.push((pop.pair(i, j).m0.clone(), &pop.reg.shoot));
    }
    let mut worst: f64 = 0.0;
    for (m0, shoot_cfg) in &fixtures {
        for s in shoot_sequence(m0, &ts, shoot_cfg).unwrap() {
            let err = compose_maps(&s.phi, &s.phi_inv).unwrap().max_deviation_from_identity(2) / s.phi.grid().min_spacing();
            worst = worst.max(err);
        }
    }
    outcome(worst < 0.5, format!("max interior error {worst:.3} voxel on {} fixtures", fixtures.len()))
}

fn registration_quality(pop: &Population) -> Outcome {
    let n = pop.n;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let m0 = &pop.pair(i, j).m0;
            let warped = pop.images[i].interpolate(&shoot(m0, 1.0, &pop.reg.shoot).unwrap().phi_inv).unwrap();
            warped.ssd(&pop.images[j]).unwrap() / pop.images[i].ssd(&pop.images[j]).unwrap()
        })
        .collect();
    let (worst, at) = ratios.iter().zip(&pairs).fold((0.0, (0, 0)), |acc, (&r, &p)| if r > acc.0 { (r, p) } else { acc });
    let r = register(&pop.images[3], &pop.images[3], &pop.reg).unwrap();
    let norm = r.m0.l2_norm() * pop.images[3].grid().voxel_volume().sqrt();
    let tol = pop.reg.optimizer.grad_tol;
    outcome(
        worst < 0.2 && norm < tol,
        format!("worst SSD ratio {worst:.4} ({}->{}) over {} pairs; identical pair |m0| {norm:.1e} (tol {tol:.0e})", at.0, at.1, pairs.len()),
    )
}

fn subspace_consistency(pop: &Population) -> Outcome {
    let reg = register(&pop.images[0], &pop.images[1], &pop.reg).unwrap();
    let cached = pop.pair(0, 1);
    let other = pop.pair(0, 2);
    let set = MomentumSet::new(
        pop.ids[0].clone(),
        vec![cached.m0.clone(), other.m0.clone()],
        vec![cached.provenance.clone(), other.provenance.clone()],
    )
    .unwrap();
    let one_hot = sample_at(&set, &[1.0, 0.0], 1.0, &pop.reg.shoot).unwrap();
    let diff = pop.images[0].interpolate(&one_hot.phi_inv).unwrap().max_abs_diff(&reg.final_warped);
    let zero = sample_at(&set, &[0.3, 0.7], 0.0, &pop.reg.shoot).unwrap();
    let exact = pop.images[0].interpolate(&zero.phi_inv).unwrap() == pop.images[0];
    outcome(
        diff < INTERP_TOL && exact && cached.m0 == reg.m0,
        format!("one-hot t=1 max diff {diff:.1e}; t=0 bit-exact {exact}"),
    )
}

fn pipeline_end_to_end(small: &Population) -> Outcome {
    let held_out = small.n..small.ids.len();
    let train = small.subjects(0..small.n);
    let sampler = SamplerConfig { t_range: [-1.0, 2.0], k: 2, rng_seed: 7, shoot: small.reg.shoot.clone() };
    let out = augment_train(&train, 50, &sampler, &small.reg, &small.cache).unwrap();
    let positive = out.examples.iter().all(|e| e.lineage.min_jacobian > 0.0);
    let replayed = out
        .examples
        .iter()
        .all(|e| replay_train(&train, &e.lineage, &small.reg.shoot, &small.reg, &small.cache).unwrap() == *e);

    let seg = atlas_segmenter(&train[0].image, &train[0].labels, &small.reg).unwrap();
    let train_images: Vec<(String, ScalarField)> = train.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
    let single_cfg = SamplerConfig { t_range: [0.0, 0.0], ..sampler.clone() };
    let (mut fused, mut single) = (0.0, 0.0);
    let count = held_out.len() as f64;
    for i in held_out {
        let (id, image, truth) = (&small.ids[i], &small.images[i], &small.labels[i]);
        let f = augment_test(id, image, &train_images, &seg, 20, &sampler, &small.reg, &small.cache).unwrap();
        let s = augment_test(id, image, &train_images, &seg, 1, &single_cfg, &small.reg, &small.cache).unwrap();
        fused += dice(&f.labels, truth).unwrap().mean / count;
        single += dice(&s.labels, truth).unwrap().mean / count;
    }
    outcome(
        out.examples.len() == 50 && positive && replayed && fused >= single - 0.01,
        format!(
            "{} train examples, Jacobian-positive {positive}, replay bit-exact {replayed}; mean Dice fused {fused:.4} vs single view {single:.4}",
            out.examples.len()
        ),
    )
}

fn one_shot(pop: &Population) -> Outcome {
    let atlas = pop.subjects(0..1).remove(0);
    let unlabeled: Vec<(String, ScalarField)> = pop.ids[..pop.n].iter().cloned().zip(pop.images.iter().cloned()).collect();
    let sampler = SamplerConfig { t_range: [-1.0, 2.0], k: 2, rng_seed: 11, shoot: pop.reg.shoot.clone() };
    let mut notes = Vec::new();
    let mut pass = true;
    for variant in [OneShotVariant::FluidAugReal, OneShotVariant::FluidAugRealT1, OneShotVariant::BrainstormReal] {
        let ctx = OneShotContext::prepare(&atlas, &unlabeled, &sampler, &pop.reg, variant, &pop.cache).unwrap();
        let examples = ctx.generate(10).unwrap();
        let ok = examples.len() == 10 && ctx.failures.is_empty() && examples.iter().all(|e| e.lineage.min_jacobian > 0.0);
        pass &= ok;
        notes.push(format!("{variant:?}: {} examples", examples.len()));
        if variant == OneShotVariant::BrainstormReal {
            continue;
        }
        let mut worst: f64 = 0.0;
        for j in 1..pop.n {
            let e = ctx.synthesize(0, &[j], &[1.0], 1.0, 0).unwrap();
            let end = shoot(&pop.pair(0, j).m0, 1.0, &pop.reg.shoot).unwrap();
            let target = pop.images[0].interpolate(&end.phi_inv).unwrap();
            worst = worst.max(e.image.max_abs_diff(&target));
        }
        pass &= worst < 2.0 * INTERP_TOL;
        notes.push(format!("endpoint diff {worst:.1e}"));
    }
    outcome(pass, notes.join("; "))
}

fn sampling_statistics() -> Outcome {
    let n = 100_000;
    let mut worst_lambda: f64 = 0.0;
    for k in [2usize, 3, 5] {
        let mut rng = stream_rng(2024, k as u64);
        let mut sums = vec![0.0; k];
        for _ in 0..n {
            for (s, l) in sums.iter_mut().zip(sample_lambda(k, &mut rng).unwrap()) {
                *s += l;
            }
        }
        for s in sums {
            worst_lambda = worst_lambda.max((s / n as f64 - 1.0 / k as f64).abs());
        }
    }
    let g = GridSpec::unit(&[4, 4]).unwrap();
    let cfg = SamplerConfig { t_range: [-1.0, 2.0], k: 2, rng_seed: 5, shoot: ShootConfig::default_for_grid(&g) };
    let mut rng = stream_rng(cfg.rng_seed, 0);
    let mean_t = (0..n).map(|_| sample_t(&cfg, &mut rng)).sum::<f64>() / n as f64;
    let t_err = (mean_t - 0.5).abs();
    outcome(
        worst_lambda < 0.01 && t_err < 0.02,
        format!("max lambda marginal error {worst_lambda:.1e} (K=2,3,5); t mean {mean_t:.4}"),
    )
}

// ---------------------------------------------------------------------------
// Determinism through the CLI

fn geoflow(args: &[&str], threads: usize) -> std::process::Child {
    Command::new(env!("CARGO_BIN_EXE_geoflow"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .expect("spawn geoflow")
}

fn run_ok(args: &[&str], threads: usize) -> Result<(), String> {
    let out = geoflow(args, threads).wait_with_output().unwrap();
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("geoflow {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let (data, test) = (d("data"), d("test"));
    let img = |set: &str, id: &str| format!("{set}/{id}_image.gf");
    // Determinism does not depend on registration quality; keep the runs short.
    let config = d("run.toml");
    std::fs::write(&config, "[shoot]\nsteps_per_unit_time = 10\n[registration]\nmultiscale = [{ factor = 2, iters = 12 }, { factor = 1, iters = 8 }]\n").unwrap();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("data", vec!["gen".into(), "--size".into(), "24".into(), "--count".into(), "5".into(), "--seed".into(), "3".into()]),
        ("test", vec!["gen".into(), "--size".into(), "24".into(), "--count".into(), "2".into(), "--seed".into(), "4".into(), "--prefix".into(), "test".into()]),
        ("reg", vec!["register".into(), "--source".into(), img(&data, "img00"), "--target".into(), img(&data, "img01")]),
        ("reg2", vec!["register".into(), "--source".into(), img(&data, "img00"), "--target".into(), img(&data, "img02")]),
        ("shoot", vec!["shoot".into(), "--momentum".into(), format!("{}/m0.gf", d("reg")), "--t".into(), "-1,0.5,2".into(), "--image".into(), img(&data, "img00")]),
        (
            "subspace",
            vec![
                "subspace".into(), "--momenta".into(), format!("{}/m0.gf", d("reg")), format!("{}/m0.gf", d("reg2")),
                "--source".into(), img(&data, "img00"), "--samples".into(), "4".into(), "--panel".into(),
            ],
        ),
        ("train", vec!["augment-train".into(), "--dataset".into(), data.clone(), "--n-out".into(), "6".into()]),
        ("tta", vec!["augment-test".into(), "--train".into(), data.clone(), "--test".into(), test.clone(), "--n-views".into(), "3".into()]),
        ("dice", vec!["dice".into(), "--a".into(), format!("{}/predictions", d("tta")), "--b".into(), test.clone()]),
        ("oneshot", vec!["oneshot".into(), "--dataset".into(), data.clone(), "--n-out".into(), "4".into()]),
        ("bspline", vec!["bspline".into(), "--dataset".into(), data.clone(), "--n-out".into(), "4".into()]),
        ("jacobian", vec!["jacobian".into(), "--map".into(), format!("{}/t+2.000_phi_inv.gf", d("shoot"))]),
        ("export", vec!["export".into(), "--input".into(), img(&data, "img00")]),
    ];
    for (name, args) in &steps {
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = d(name);
        a.extend(["--out", out.as_str(), "--config", config.as_str()]);
        if let Err(e) = run_ok(&a, 1) {
            return outcome(false, e);
        }
    }
    let mut files = 0;
    for (name, _) in &steps {
        let original = tree(&tmp.path().join(name));
        files += original.len();
        // One replay on four threads, then two concurrent replays.
        let r1 = d(&format!("{name}_r1"));
        if let Err(e) = run_ok(&["replay", "--manifest", &d(name), "--out", &r1], 4) {
            return outcome(false, e);
        }
        let (r2, r3) = (d(&format!("{name}_r2")), d(&format!("{name}_r3")));
        let c2 = geoflow(&["replay", "--manifest", &d(name), "--out", &r2], 2);
        let c3 = geoflow(&["replay", "--manifest", &d(name), "--out", &r3], 3);
        for c in [c2, c3] {
            let o = c.wait_with_output().unwrap();
            if !o.status.success() {
                return outcome(false, format!("concurrent replay of {name} failed: {}", String::from_utf8_lossy(&o.stderr).trim()));
            }
        }
        for r in [&r1, &r2, &r3] {
            if tree(Path::new(r)) != original {
                return outcome(false, format!("replay of {name} into {r} differs"));
            }
        }
    }
    outcome(true, format!("{} runs, {files} files reproduced bit-exactly by serial, multi-threaded and concurrent replays", steps.len()))
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("GEOFLOW_CRITERIA").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let pop = Population::new(64, 10, 5);
    let mut disc: Option<(VectorField, RegConfig)> = None;
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t0 = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(&mut *f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("aborted: {msg}"))
        });
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:2} {name}: {status} ({}; {:.1}s)", o.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    };
    report(1, "gradient exactness", &mut gradient_exactness);
    report(2, "geodesic conservation", &mut || conservation(&pop));
    report(3, "diffeomorphic extrapolation", &mut || {
        let (m0, cfg) = disc.get_or_insert_with(disc_momentum);
        extrapolation(m0, cfg, &pop)
    });
    report(4, "inverse consistency", &mut || {
        let (m0, cfg) = disc.get_or_insert_with(disc_momentum);
        inverse_consistency(m0, cfg, &pop)
    });
    report(5, "registration quality", &mut || registration_quality(&pop));
    report(6, "subspace consistency", &mut || subspace_consistency(&pop));
    report(7, "pipeline end-to-end", &mut || pipeline_end_to_end(&pop));
    report(8, "one-shot variants", &mut || one_shot(&pop));
    report(9, "sampling statistics", &mut sampling_statistics);
    report(10, "determinism", &mut determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
