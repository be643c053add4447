use approx::assert_relative_eq;
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;

use super::*;
use crate::gaussians::{logit, KeyframeId};
use crate::testing;

fn k16() -> Intrinsics {
    Intrinsics::new(20.0, 20.0, 7.5, 7.5, 16, 16)
}

fn single(map: &mut GaussianMap, mean: Vector3<f64>, scale: f64, o: f64, color: Vector3<f64>) {
    map.insert_raw(Gaussian {
        id: 0,
        mean,
        rotation: UnitQuaternion::identity(),
        log_scale: Vector3::repeat(scale.ln()),
        logit_opacity: logit(o),
        color,
        anchor_kf: KeyframeId(0),
        birth_kf: KeyframeId(0),
    });
}

#[test]
fn splat_project_axis_example() {
    // Isotropic s=0.1 at depth 2, fx=fy=100: Σ' = diag((100·0.1/2)²) + 0.3.
    let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101);
    let mut map = GaussianMap::new();
    single(&mut map, Vector3::new(0.0, 0.0, 2.0), 0.1, 0.6, Vector3::repeat(0.5));
    let params = RenderParams::default();
    let (mean2d, cov2d, z) =
        splat_project(&map.gaussians()[0], &Pose::identity(), &k, &params).unwrap();
    assert_relative_eq!(mean2d, Vector2::new(50.0, 50.0), epsilon = 1e-12);
    assert_relative_eq!(z, 2.0, epsilon = 1e-12);
    assert_relative_eq!(cov2d[(0, 0)], 25.3, epsilon = 1e-9);
    assert_relative_eq!(cov2d[(1, 1)], 25.3, epsilon = 1e-9);
    assert!(cov2d[(0, 1)].abs() < 1e-9);
}

#[test]
fn splat_behind_camera_is_culled() {
    let k = k16();
    let mut map = GaussianMap::new();
    single(&mut map, Vector3::new(0.0, 0.0, -1.0), 0.1, 0.6, Vector3::repeat(0.5));
    assert!(splat_project(&map.gaussians()[0], &Pose::identity(), &k, &RenderParams::default()).is_none());
}

#[test]
fn splat_gauge_invariance() {
    // Rotating camera and Gaussian by the same world rotation leaves the
    // projection unchanged.
    let k = k16();
    let mut map = GaussianMap::new();
    single(&mut map, Vector3::new(0.3, -0.2, 2.5), 0.15, 0.7, Vector3::repeat(0.5));
    let params = RenderParams::default();
    let g = map.gaussians()[0].clone();
    let pose = Pose::from_parts(Vector3::new(0.1, 0.2, -0.1), Vector3::new(0.2, 0.1, -0.3));
    let (m0, c0, z0) = splat_project(&g, &pose, &k, &params).unwrap();

    let world_rot = Pose::from_parts(Vector3::new(0.4, -0.3, 0.9), Vector3::new(1.0, -2.0, 0.5));
    let mut g2 = g.clone();
    g2.mean = world_rot.transform_point(&g.mean);
    g2.rotation = world_rot.rotation * g.rotation;
    let pose2 = world_rot.compose(&pose);
    let (m1, c1, z1) = splat_project(&g2, &pose2, &k, &params).unwrap();
    assert_relative_eq!(m0, m1, epsilon = 1e-9);
    assert_relative_eq!(z0, z1, epsilon = 1e-9);
    assert_relative_eq!(c0, c1, epsilon = 1e-9);
}

#[test]
fn single_opaque_gaussian_center_pixel() {
    let k = Intrinsics::new(20.0, 20.0, 7.0, 7.0, 16, 16);
    let mut map = GaussianMap::new();
    // Opacity pushed to the cap; center pixel must give α≈1, C≈c, D=z.
    map.insert_raw(Gaussian {
        id: 0,
        mean: Vector3::new(0.0, 0.0, 2.0),
        rotation: UnitQuaternion::identity(),
        log_scale: Vector3::repeat(0.4f64.ln()),
        logit_opacity: 40.0,
        color: Vector3::new(0.2, 0.6, 0.9),
        anchor_kf: KeyframeId(0),
        birth_kf: KeyframeId(0),
    });
    let out = render(&map, &Pose::identity(), &k, (1.0, 0.0), &RenderParams::default());
    // μ' lands exactly on pixel (7, 7).
    let a = *out.alpha.get(7, 7);
    assert!(a > 0.999, "alpha {a}");
    let c = out.color.get(7, 7);
    assert_relative_eq!(c / a, Vector3::new(0.2, 0.6, 0.9), epsilon = 1e-2);
    assert_relative_eq!(*out.depth.get(7, 7) / a, 2.0, epsilon = 1e-6);
}

#[test]
fn two_coincident_gaussians_hand_compositing() {
    // α₁ = α₂ = 0.5 at the evaluation point: C = 0.5c₁ + 0.25c₂, α = 0.75.
    // Opacities are chosen so the capped opacity times the density at the
    // probe pixel equals 0.5.
    let k = k16();
    let mut map = GaussianMap::new();
    let big = 2.0; // big isotropic scale → density ≈ 1 at center
    single(&mut map, Vector3::new(0.0, 0.0, 2.0), big, 0.5, Vector3::new(1.0, 0.0, 0.0));
    single(&mut map, Vector3::new(0.0, 0.0, 3.0), big, 0.5, Vector3::new(0.0, 1.0, 0.0));
    let out = render(&map, &Pose::identity(), &k, (1.0, 0.0), &RenderParams::default());
    // Probe near the projected center; huge scale makes the density ≈ 1 over
    // the whole image.
    let c = out.color.get(7, 7);
    assert_relative_eq!(c[0], 0.5, epsilon = 2e-3);
    assert_relative_eq!(c[1], 0.25, epsilon = 2e-3);
    assert_relative_eq!(*out.alpha.get(7, 7), 0.75, epsilon = 2e-3);
    // Depth composites the same way: 0.5·2 + 0.25·3.
    assert_relative_eq!(*out.depth.get(7, 7), 1.75, epsilon = 6e-3);
}

#[test]
fn empty_map_renders_zeros() {
    let k = k16();
    let map = GaussianMap::new();
    let out = render(&map, &Pose::identity(), &k, (1.0, 0.0), &RenderParams::default());
    assert!(out.color.as_slice().iter().all(|c| *c == Vector3::zeros()));
    assert!(out.depth.as_slice().iter().all(|d| *d == 0.0));
    assert!(out.alpha.as_slice().iter().all(|a| *a == 0.0));
}

#[test]
fn order_invariance_under_permutation() {
    let (map, pose, k) = testing::sample_composite_scene(42, 8, 16, 16);
    let params = RenderParams::default();
    let out = render(&map, &pose, &k, (1.0, 0.0), &params);
    // Rebuild the map with gaussians inserted in reverse order but keeping
    // their ids.
    let mut rev = GaussianMap::new();
    let mut gs: Vec<_> = map.gaussians().to_vec();
    gs.reverse();
    for g in &gs {
        rev.insert_raw(g.clone());
    }
    // insert_raw reassigns ids; restore the originals to keep tie-breaking
    // identical.
    for (g_new, g_old) in rev.gaussians_mut().iter_mut().zip(gs.iter()) {
        g_new.id = g_old.id;
    }
    let out_rev = render(&rev, &pose, &k, (1.0, 0.0), &params);
    for (a, b) in out.color.as_slice().iter().zip(out_rev.color.as_slice()) {
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
    for (a, b) in out.depth.as_slice().iter().zip(out_rev.depth.as_slice()) {
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn depth_of_opaque_gaussian_matches_camera_z() {
    let k = k16();
    let mut map = GaussianMap::new();
    map.insert_raw(Gaussian {
        id: 0,
        mean: Vector3::new(0.1, -0.05, 2.3),
        rotation: UnitQuaternion::identity(),
        log_scale: Vector3::repeat(1.0f64.ln()),
        logit_opacity: 40.0,
        color: Vector3::repeat(0.5),
        anchor_kf: KeyframeId(0),
        birth_kf: KeyframeId(0),
    });
    let out = render(&map, &Pose::identity(), &k, (1.0, 0.0), &RenderParams::default());
    for (x, y, &a) in out.alpha.pixels() {
        if a > 0.99 {
            assert_relative_eq!(*out.depth.get(x, y) / a, 2.3, epsilon = 1e-6);
        }
    }
}

#[test]
fn transmittance_telescoping() {
    let (map, pose, k) = testing::sample_composite_scene(7, 10, 16, 16);
    let params = RenderParams::default();
    let out = render(&map, &pose, &k, (1.0, 0.0), &params);
    // Direct product over the same contribution set.
    let splats = project_splats(&map, &pose, &k, &params);
    let cutoff_q = params.sigma_cutoff * params.sigma_cutoff;
    for y in 0..16 {
        for x in 0..16 {
            let pix = Vector2::new(x as f64, y as f64);
            let mut t = 1.0;
            for s in &splats {
                let d = pix - s.mean2d;
                let q = s.conic[(0, 0)] * d[0] * d[0]
                    + (s.conic[(0, 1)] + s.conic[(1, 0)]) * d[0] * d[1]
                    + s.conic[(1, 1)] * d[1] * d[1];
                if q > cutoff_q {
                    continue;
                }
                t *= 1.0 - s.opacity * (-0.5 * q).exp();
                if t < params.min_transmittance {
                    break;
                }
            }
            assert_relative_eq!(*out.alpha.get(x, y), 1.0 - t, epsilon = 1e-9);
        }
    }
}

#[test]
fn tiled_matches_brute_force_oracle() {
    let params = RenderParams::default();
    for seed in 0..10u64 {
        let (map, pose, k) = testing::sample_composite_scene(seed, 12, 33, 21);
        let out = render(&map, &pose, &k, (1.0, 0.0), &params);
        let (oc, od, oa) = testing::reference_render(&map, &pose, &k, (1.0, 0.0), &params);
        for ((a, b), (da, db)) in out
            .color
            .as_slice()
            .iter()
            .zip(oc.as_slice())
            .zip(out.depth.as_slice().iter().zip(od.as_slice()))
        {
            assert!((a - b).amax() < 1e-6, "color mismatch seed {seed}");
            assert!((da - db).abs() < 1e-6, "depth mismatch seed {seed}");
        }
        for (a, b) in out.alpha.as_slice().iter().zip(oa.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_adjoints_zero_gradients() {
    let (map, pose, k) = testing::sample_composite_scene(3, 6, 16, 16);
    let d_c = Grid::filled(16, 16, Vector3::zeros());
    let d_d = Grid::filled(16, 16, 0.0);
    let buf = render_gradients(&map, &pose, &k, (1.0, 0.0), &d_c, &d_d, &RenderParams::default());
    assert!(buf.d_mean.iter().all(|v| *v == Vector3::zeros()));
    assert!(buf.d_color.iter().all(|v| *v == Vector3::zeros()));
    assert!(buf.d_logit_opacity.iter().all(|v| *v == 0.0));
    assert_eq!(buf.d_exposure, (0.0, 0.0));
}

#[test]
fn color_gradient_is_alpha_at_center() {
    // Single Gaussian, dL/dC = 1 at its center pixel: dc = α there.
    let k = Intrinsics::new(20.0, 20.0, 7.0, 7.0, 16, 16); // integer center
    let mut map = GaussianMap::new();
    single(&mut map, Vector3::new(0.0, 0.0, 2.0), 0.2, 0.6, Vector3::repeat(0.4));
    let params = RenderParams::default();
    let out = render(&map, &Pose::identity(), &k, (1.0, 0.0), &params);
    let mut d_c = Grid::filled(16, 16, Vector3::zeros());
    *d_c.get_mut(7, 7) = Vector3::new(1.0, 1.0, 1.0);
    let d_d = Grid::filled(16, 16, 0.0);
    let buf = render_gradients(&map, &Pose::identity(), &k, (1.0, 0.0), &d_c, &d_d, &params);
    let alpha = *out.alpha.get(7, 7);
    for ch in 0..3 {
        assert_relative_eq!(buf.d_color[0][ch], alpha, epsilon = 1e-9);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let params = RenderParams::default();
    let h = 1e-4;
    for seed in 100..106u64 {
        let scene = testing::sample_fd_scene(seed, 6, 16, 16);
        let analytic = render_gradients(
            &scene.map,
            &scene.pose,
            &scene.intrinsics,
            scene.exposure,
            &scene.d_color,
            &scene.d_depth,
            &params,
        );
        assert!(analytic.is_finite());
        let fd = testing::finite_difference_gradients(&scene, h, &params);
        if let Err(msg) = testing::compare_gradients(&analytic, &fd, 1e-3, 1e-6) {
            panic!("seed {seed}: {msg}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn composite_order_never_matters(seed in 0u64..500) {
        let (map, pose, k) = testing::sample_composite_scene(seed, 9, 16, 16);
        let params = RenderParams::default();
        let out = render(&map, &pose, &k, (1.0, 0.0), &params);
        let mut shuffled = GaussianMap::new();
        let gs: Vec<_> = map.gaussians().to_vec();
        let mid = gs.len() / 2;
        for g in gs[mid..].iter().chain(gs[..mid].iter()) {
            shuffled.insert_raw(g.clone());
        }
        let origs: Vec<_> = gs[mid..].iter().chain(gs[..mid].iter()).map(|g| g.id).collect();
        for (g, id) in shuffled.gaussians_mut().iter_mut().zip(origs) {
            g.id = id;
        }
        let out2 = render(&shuffled, &pose, &k, (1.0, 0.0), &params);
        for (a, b) in out.color.as_slice().iter().zip(out2.color.as_slice()) {
            prop_assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn alpha_and_depth_stay_physical(seed in 0u64..500) {
        let (map, pose, k) = testing::sample_composite_scene(seed, 9, 16, 16);
        let out = render(&map, &pose, &k, (1.0, 0.0), &RenderParams::default());
        for &a in out.alpha.as_slice() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }
        for (&a, &d) in out.alpha.as_slice().iter().zip(out.depth.as_slice()) {
            if a > 0.0 {
                prop_assert!(d >= 0.0);
            }
        }
    }
}
