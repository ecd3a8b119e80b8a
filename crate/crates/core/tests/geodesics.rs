//! Shooting, registration and pipeline properties on small fixtures.

use geoflow_core::augment::OneShotContext;
use geoflow_core::*;

fn disc(n: usize, c: [f64; 2], r: f64) -> ScalarField {
    let spec = ShapeSceneSpec {
        grid: GridSpec::unit(&[n, n]).unwrap(),
        shapes: vec![Shape { kind: ShapeKind::Ellipse, center: c.to_vec(), radii: vec![r, r], label: 1, intensity: 1.0, edge: 2.0 }],
        noise: 0.0,
        rng_seed: 0,
    };
    generate_scene(&spec).unwrap().0
}

/// A smooth compactly concentrated momentum.
fn bump(g: &GridSpec, amp: f64) -> VectorField {
    let c = g.dims().iter().map(|&n| (n as f64 - 1.0) / 2.0).collect::<Vec<_>>();
    VectorField::from_fn(g.clone(), |p| {
        let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        let w = (-r2 / 40.0).exp() * amp;
        [w, 0.5 * w, 0.0]
    })
}

fn map_diff(a: &DeformationMap, b: &DeformationMap) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn endpoint_self_convergence() {
    let g = GridSpec::unit(&[32, 32]).unwrap();
    let m0 = bump(&g, 1.5);
    let cfg = |steps| ShootConfig::new(steps, KernelSpec::default_for_grid(&g)).unwrap();
    let reference = shoot(&m0, 1.0, &cfg(320)).unwrap().phi_inv;
    let coarse = shoot(&m0, 1.0, &cfg(20)).unwrap().phi_inv;
    let finer = shoot(&m0, 1.0, &cfg(40)).unwrap().phi_inv;
    let (e20, e40) = (map_diff(&coarse, &reference), map_diff(&finer, &reference));
    assert!(e20 < 0.01, "20 steps off by {e20} voxel");
    assert!(e40 <= e20 / 2.0 || e40 < 1e-9, "no convergence: {e20} -> {e40}");
}

#[test]
fn smooth_fixture_stays_diffeomorphic_when_extrapolated() {
    let g = GridSpec::unit(&[32, 32]).unwrap();
    let m0 = bump(&g, 1.5);
    let cfg = ShootConfig::default_for_grid(&g);
    for s in shoot_sequence(&m0, &[-3.0, -1.0, 0.5, 1.0, 2.0, 4.0], &cfg).unwrap() {
        assert!(min_jacobian_determinant(&s.phi_inv) > 0.0, "fold at t = {}", s.t);
        assert!(min_jacobian_determinant(&s.phi) > 0.0, "fold at t = {}", s.t);
    }
}

#[test]
fn registration_energy_never_increases_within_a_level() {
    let a = disc(32, [15.5, 15.5], 7.0);
    let b = disc(32, [17.5, 15.5], 8.0);
    let cfg = RegConfig::default_for_grid(a.grid());
    let r = register(&a, &b, &cfg).unwrap();
    for w in r.energy_trace.windows(2) {
        if w[0].level == w[1].level {
            assert!(w[1].total() <= w[0].total(), "{:?} -> {:?}", w[0], w[1]);
        }
    }
}

#[test]
fn zero_momentum_is_stationary_for_identical_images() {
    let a = disc(24, [11.5, 11.5], 6.0);
    let cfg = RegConfig::default_for_grid(a.grid());
    let grad = energy_gradient(&VectorField::zeros(a.grid().clone()), &a, &a, &cfg).unwrap();
    assert!(grad.l2_norm() * a.grid().voxel_volume().sqrt() < 1e-10);
}

#[test]
fn forward_and_backward_registrations_reduce_ssd_comparably() {
    let a = disc(32, [15.5, 15.5], 6.0);
    let b = disc(32, [15.5, 15.5], 9.0);
    let cfg = RegConfig::default_for_grid(a.grid());
    let reduction = |x: &ScalarField, y: &ScalarField| {
        let r = register(x, y, &cfg).unwrap();
        x.ssd(y).unwrap() / r.final_warped.ssd(y).unwrap()
    };
    let (f, b) = (reduction(&a, &b), reduction(&b, &a));
    assert!(f / b < 2.0 && b / f < 2.0, "forward {f}, backward {b}");
}

fn tiny_population() -> (Vec<Subject>, RegConfig) {
    let base = ShapeSceneSpec::default_2d(24).unwrap();
    let pop = generate_population(&base, 4, &PerturbationScales::default(), 9).unwrap();
    let mut reg = RegConfig::default_for_grid(pop[0].0.grid());
    reg.multiscale = vec![ScaleLevel { factor: 2, iters: 15 }, ScaleLevel { factor: 1, iters: 10 }];
    let subjects = pop
        .into_iter()
        .enumerate()
        .map(|(i, (im, l))| Subject::new(format!("s{i}"), im, l).unwrap())
        .collect();
    (subjects, reg)
}

#[test]
fn single_identity_view_equals_direct_segmentation() {
    let (subjects, reg) = tiny_population();
    let seg = atlas_segmenter(&subjects[0].image, &subjects[0].labels, &reg).unwrap();
    let cfg = SamplerConfig { t_range: [0.0, 0.0], k: 2, rng_seed: 1, shoot: reg.shoot.clone() };
    let image = &subjects[2].image;
    let out = augment_test("s2", image, &[], &seg, 1, &cfg, &reg, &MomentumCache::in_memory()).unwrap();
    let direct = seg.segment(image).unwrap();
    assert_eq!(out.labels, direct.argmax());
    assert_eq!(out.fused, direct);
}

#[test]
fn pipeline_lineages_replay_bit_exactly() {
    let (subjects, reg) = tiny_population();
    let cache = MomentumCache::in_memory();
    let cfg = SamplerConfig { t_range: [-1.0, 2.0], k: 2, rng_seed: 3, shoot: reg.shoot.clone() };
    let out = augment_train(&subjects, 5, &cfg, &reg, &cache).unwrap();
    assert_eq!(out.examples.len(), 5);
    for e in &out.examples {
        assert!(e.lineage.min_jacobian > 0.0);
        let again = augment::replay_train(&subjects, &e.lineage, &reg.shoot, &reg, &cache).unwrap();
        assert_eq!(&again, e);
    }

    let unlabeled: Vec<_> = subjects.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
    let ctx = OneShotContext::prepare(&subjects[0], &unlabeled, &cfg, &reg, OneShotVariant::FluidAugReal, &cache).unwrap();
    for e in ctx.generate(3).unwrap() {
        assert_eq!(ctx.replay(&e.lineage).unwrap(), e);
    }
}

#[test]
fn sampling_is_a_pure_function_of_the_seed() {
    let (subjects, reg) = tiny_population();
    let cache = MomentumCache::in_memory();
    let cfg = SamplerConfig { t_range: [-1.0, 2.0], k: 2, rng_seed: 5, shoot: reg.shoot.clone() };
    let a = augment_train(&subjects, 3, &cfg, &reg, &cache).unwrap();
    let b = augment_train(&subjects, 3, &cfg, &reg, &MomentumCache::in_memory()).unwrap();
    assert_eq!(a.examples, b.examples);
}
