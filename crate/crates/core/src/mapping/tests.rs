use std::collections::BTreeSet;

use approx::assert_relative_eq;
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gaussians::Gaussian;
use crate::grid::Grid;
use crate::proxy::ProxySource;
use crate::render::render;

fn k32() -> Intrinsics {
    Intrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32)
}

fn flat_proxy(w: usize, h: usize, d: f64) -> ProxyDepth {
    ProxyDepth {
        depth: Grid::filled(w, h, d),
        source: Grid::filled(w, h, ProxySource::Multiview),
    }
}

/// A small wall of Gaussians at z≈2 with dense coverage.
fn wall_map(rng: &mut StdRng, n_side: usize) -> GaussianMap {
    let mut map = GaussianMap::new();
    for iy in 0..n_side {
        for ix in 0..n_side {
            let x = (ix as f64 / (n_side - 1) as f64 - 0.5) * 2.4;
            let y = (iy as f64 / (n_side - 1) as f64 - 0.5) * 2.4;
            map.insert_raw(Gaussian {
                id: 0,
                mean: Vector3::new(x, y, 2.0 + rng.random_range(-0.02..0.02)),
                rotation: UnitQuaternion::identity(),
                log_scale: Vector3::repeat((2.4 / n_side as f64 * 0.5).ln()),
                logit_opacity: 3.0,
                color: Vector3::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                ),
                anchor_kf: KeyframeId(0),
                birth_kf: KeyframeId(0),
            });
        }
    }
    map
}

#[test]
fn loss_zero_for_perfect_render_and_isotropic_scales() {
    let k = k32();
    let mut rng = StdRng::seed_from_u64(1);
    let map = wall_map(&mut rng, 12);
    let params = RenderParams::default();
    let out = render(&map, &Pose::identity(), &k, (1.0, 0.0), &params);
    // Targets equal the render; proxy equals the rendered depth wherever
    // covered.
    let proxy = ProxyDepth {
        depth: out.depth.clone(),
        source: out.alpha.map(|&a| {
            if a >= 0.5 {
                ProxySource::Multiview
            } else {
                ProxySource::Invalid
            }
        }),
    };
    let frames = [MapFrame {
        kf: KeyframeId(0),
        pose: Pose::identity(),
        image: &out.color,
        proxy: &proxy,
        exposure: (1.0, 0.0),
    }];
    let config = MappingConfig::default();
    let bundle = compute_loss(&map, &frames, &config, &k, &params);
    assert!(bundle.loss < 1e-12, "loss {}", bundle.loss);
    assert!(bundle
        .adjoints[0]
        .d_color
        .as_slice()
        .iter()
        .all(|v| *v == Vector3::zeros()));
}

#[test]
fn scale_regularizer_hand_value() {
    // Single Gaussian with s = (1, 2, 3): term = λ_reg·(|1-2|+|2-2|+|3-2|)/1
    // with s̃ = 2, divided by |𝒢| = 1.
    let k = k32();
    let mut map = GaussianMap::new();
    map.insert_raw(Gaussian {
        id: 0,
        mean: Vector3::new(0.0, 0.0, -5.0), // behind the camera: culled
        rotation: UnitQuaternion::identity(),
        log_scale: Vector3::new(1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()),
        logit_opacity: -10.0,
        color: Vector3::repeat(0.5),
        anchor_kf: KeyframeId(0),
        birth_kf: KeyframeId(0),
    });
    let image = Grid::filled(32, 32, Vector3::zeros());
    let proxy = ProxyDepth {
        depth: Grid::filled(32, 32, 0.0),
        source: Grid::filled(32, 32, ProxySource::Invalid),
    };
    let frames = [MapFrame {
        kf: KeyframeId(0),
        pose: Pose::identity(),
        image: &image,
        proxy: &proxy,
        exposure: (1.0, 0.0),
    }];
    let config = MappingConfig {
        lambda: 0.8,
        lambda_reg: 10.0,
        ..Default::default()
    };
    let bundle = compute_loss(&map, &frames, &config, &k32(), &RenderParams::default());
    let _ = k;
    assert_relative_eq!(bundle.loss, 10.0 * 2.0, epsilon = 1e-12);
}

#[test]
fn defaults_match_published_loss_weights() {
    let config = MappingConfig::default();
    assert_eq!(config.lambda, 0.8);
    assert_eq!(config.lambda_reg, 10.0);
    assert_eq!(config.iterations, 60);
    assert_eq!(config.kf_cov, 0.95);
    assert_eq!(config.kf_m, 0.04);
    assert_eq!(config.kf_c, 0.3);
    assert_eq!(config.beta, 2000);
}

#[test]
fn loss_adjoints_match_finite_differences_away_from_kinks() {
    // Perturb the scalar loss with respect to rendered color/depth via the
    // adjoint definition: dL = Σ adj·dX. Compare against direct re-evaluation
    // with perturbed render targets (the adjoint of the L1 is its sign).
    let k = k32();
    let mut rng = StdRng::seed_from_u64(2);
    let map = wall_map(&mut rng, 10);
    let params = RenderParams::default();
    let out = render(&map, &Pose::identity(), &k, (1.0, 0.0), &params);
    // Shifted targets keep every residual away from the L1 kink.
    let image = out.color.map(|c| c.map(|v| (v + 0.07).clamp(0.0, 1.0)));
    let proxy = ProxyDepth {
        depth: out.depth.map(|d| d + 0.05),
        source: out.alpha.map(|&a| {
            if a >= 0.5 {
                ProxySource::Multiview
            } else {
                ProxySource::Invalid
            }
        }),
    };
    let config = MappingConfig::default();
    let frames = [MapFrame {
        kf: KeyframeId(0),
        pose: Pose::identity(),
        image: &image,
        proxy: &proxy,
        exposure: (1.0, 0.0),
    }];
    let bundle = compute_loss(&map, &frames, &config, &k, &params);
    let n_k = (32 * 32) as f64;
    for (x, y, adj) in bundle.adjoints[0].d_color.pixels() {
        let res = out.color.get(x, y) - image.get(x, y);
        for ch in 0..3 {
            if res[ch].abs() > 1e-3 {
                let expected = config.lambda / n_k * res[ch].signum();
                assert_relative_eq!(adj[ch], expected, epsilon = 1e-12);
            }
        }
    }
    for (x, y, adj) in bundle.adjoints[0].d_depth.pixels() {
        if proxy.valid_depth(x, y).is_some() && *out.alpha.get(x, y) >= 0.5 {
            let res = out.depth.get(x, y) - proxy.depth.get(x, y);
            if res.abs() > 1e-3 {
                let expected = (1.0 - config.lambda) / n_k * res.signum();
                assert_relative_eq!(*adj, expected, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn optimize_recovers_perturbed_colors() {
    let k = k32();
    let mut rng = StdRng::seed_from_u64(3);
    let map_gt = wall_map(&mut rng, 12);
    let params = RenderParams::default();
    let gt = render(&map_gt, &Pose::identity(), &k, (1.0, 0.0), &params);
    let proxy = ProxyDepth {
        depth: gt.depth.clone(),
        source: gt.alpha.map(|&a| {
            if a >= 0.5 {
                ProxySource::Multiview
            } else {
                ProxySource::Invalid
            }
        }),
    };

    let mut map = map_gt.clone();
    for g in map.gaussians_mut() {
        g.color = g
            .color
            .map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
    }
    let frames = [MapFrame {
        kf: KeyframeId(0),
        pose: Pose::identity(),
        image: &gt.color,
        proxy: &proxy,
        exposure: (1.0, 0.0),
    }];
    let config = MappingConfig::default();
    let photometric = |m: &GaussianMap| -> f64 {
        let out = render(m, &Pose::identity(), &k, (1.0, 0.0), &params);
        let mut loss = 0.0;
        for (a, b) in out.color.as_slice().iter().zip(gt.color.as_slice()) {
            loss += (a - b).abs().sum();
        }
        loss * config.lambda / (32.0 * 32.0)
    };
    let before = photometric(&map);
    let mut optimizer = MapOptimizer::new();
    let mut global_iter = 0u64;
    let mut rng2 = ChaCha8Rng::seed_from_u64(0);
    optimize_map(
        &mut map,
        &frames,
        &mut optimizer,
        &config,
        &DensifyConfig::default(),
        &k,
        &params,
        60,
        &mut global_iter,
        false,
        false,
        &mut rng2,
    );
    let after = photometric(&map);
    assert!(
        after < before * 0.5,
        "photometric loss should halve: {before} → {after}"
    );
}

#[test]
fn optimize_zero_iterations_is_noop() {
    let k = k32();
    let mut rng = StdRng::seed_from_u64(4);
    let mut map = wall_map(&mut rng, 6);
    let before: Vec<Vector3<f64>> = map.gaussians().iter().map(|g| g.mean).collect();
    let image = Grid::filled(32, 32, Vector3::repeat(0.3));
    let proxy = flat_proxy(32, 32, 2.0);
    let frames = [MapFrame {
        kf: KeyframeId(0),
        pose: Pose::identity(),
        image: &image,
        proxy: &proxy,
        exposure: (1.0, 0.0),
    }];
    let mut optimizer = MapOptimizer::new();
    let mut it = 0u64;
    let mut rng2 = ChaCha8Rng::seed_from_u64(0);
    let result = optimize_map(
        &mut map,
        &frames,
        &mut optimizer,
        &MappingConfig::default(),
        &DensifyConfig::default(),
        &k,
        &RenderParams::default(),
        0,
        &mut it,
        false,
        true,
        &mut rng2,
    );
    assert!(result.loss_trace.is_empty());
    for (g, b) in map.gaussians().iter().zip(&before) {
        assert_eq!(g.mean, *b);
    }
}

#[test]
fn exposure_recovery_closed_loop() {
    // Render targets through (a=1.2, b=0.05); optimizing only the exposure
    // from (1, 0) with colors frozen recovers the pair.
    let k = k32();
    let mut rng = StdRng::seed_from_u64(5);
    let map = wall_map(&mut rng, 12);
    let params = RenderParams::default();
    let target = render(&map, &Pose::identity(), &k, (1.2, 0.05), &params);
    let proxy = ProxyDepth {
        depth: target.depth.clone(),
        source: Grid::filled(32, 32, ProxySource::Invalid),
    };
    let config = MappingConfig::default();
    let mut exposure = (1.0, 0.0);
    let mut optimizer = MapOptimizer::new();
    for _ in 0..200 {
        let frames = [MapFrame {
            kf: KeyframeId(0),
            pose: Pose::identity(),
            image: &target.color,
            proxy: &proxy,
            exposure,
        }];
        let bundle = compute_loss(&map, &frames, &config, &k, &params);
        exposure =
            optimizer.apply_exposure(KeyframeId(0), exposure, bundle.d_exposure[0], &config);
    }
    assert!(
        (exposure.0 - 1.2).abs() < 0.01,
        "recovered a = {}",
        exposure.0
    );
    assert!(
        (exposure.1 - 0.05).abs() < 0.01,
        "recovered b = {}",
        exposure.1
    );
}

#[test]
fn final_refine_keeps_gaussian_count() {
    let k = k32();
    let mut rng = StdRng::seed_from_u64(6);
    let mut map = wall_map(&mut rng, 8);
    let image = Grid::filled(32, 32, Vector3::repeat(0.4));
    let proxy = flat_proxy(32, 32, 2.0);
    let frames = [MapFrame {
        kf: KeyframeId(0),
        pose: Pose::identity(),
        image: &image,
        proxy: &proxy,
        exposure: (1.0, 0.0),
    }];
    let before = map.len();
    let mut optimizer = MapOptimizer::new();
    let mut rng2 = ChaCha8Rng::seed_from_u64(1);
    let (trace, _) = final_refine(
        &mut map,
        &frames,
        &mut optimizer,
        &MappingConfig::default(),
        &k,
        &RenderParams::default(),
        120,
        &mut rng2,
    );
    assert_eq!(trace.len(), 120);
    assert_eq!(map.len(), before);
}

#[test]
fn window_rejects_identical_view_and_evicts_disjoint() {
    let k = k32();
    let mut rng = StdRng::seed_from_u64(7);
    let map = wall_map(&mut rng, 12);
    let config = MappingConfig::default();
    let params = RenderParams::default();
    // Two identical poses: IOU = 1, no translation → rejected.
    let poses: Vec<Pose> = vec![
        Pose::identity(),
        Pose::identity(),
        // Far-off pose that sees nothing of the wall (looks away).
        Pose::from_parts(
            Vector3::new(0.0, std::f64::consts::PI, 0.0),
            Vector3::new(0.0, 0.0, 4.0),
        ),
    ];
    let pose_of = |kf: KeyframeId| poses[kf.0];
    let mut window = KeyframeWindow::new(8);
    let (admitted, _) = window.update(
        KeyframeId(0),
        2.0,
        &pose_of,
        &map,
        &k,
        &config,
        &params,
    );
    assert!(admitted);
    let (admitted, _) = window.update(
        KeyframeId(1),
        2.0,
        &pose_of,
        &map,
        &k,
        &config,
        &params,
    );
    assert!(!admitted, "identical view must not be admitted");
    // Disjoint visibility: admitted, and the old frame (OC = 0 < 0.3)
    // evicted.
    let (admitted, evicted) = window.update(
        KeyframeId(2),
        2.0,
        &pose_of,
        &map,
        &k,
        &config,
        &params,
    );
    assert!(admitted);
    assert_eq!(evicted, vec![KeyframeId(0)]);
    assert_eq!(window.entries(), &[KeyframeId(2)]);
}

#[test]
fn window_capacity_bound_under_random_admissions() {
    let k = k32();
    let mut rng = StdRng::seed_from_u64(8);
    let map = wall_map(&mut rng, 10);
    let config = MappingConfig::default();
    let params = RenderParams::default();
    let mut window = KeyframeWindow::new(3);
    let mut poses = Vec::new();
    for i in 0..12usize {
        poses.push(Pose::from_parts(
            Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                0.0,
            ),
            Vector3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.3..0.3),
            ),
        ));
        let poses_ref = &poses;
        let pose_of = move |kf: KeyframeId| poses_ref[kf.0];
        window.update(KeyframeId(i), 2.0, &pose_of, &map, &k, &config, &params);
        assert!(window.entries().len() <= 3);
    }
}

#[test]
fn window_visibility_matches_bruteforce_transmittance_scan() {
    let k = k32();
    let mut rng = StdRng::seed_from_u64(9);
    let map = wall_map(&mut rng, 9);
    let params = RenderParams::default();
    let pose = Pose::from_parts(Vector3::zeros(), Vector3::new(0.1, -0.05, -0.2));
    let out = render(&map, &pose, &k, (1.0, 0.0), &params);
    let vis = out.visible_ids(&map);

    // Brute-force: walk every pixel front-to-back over all splats and
    // collect ids seen while transmittance > 0.5.
    let splats = crate::render::project_splats(&map, &pose, &k, &params);
    let mut oracle = BTreeSet::new();
    let cutoff = params.sigma_cutoff * params.sigma_cutoff;
    for py in 0..32 {
        for px in 0..32 {
            let pix = Vector2::new(px as f64, py as f64);
            let mut t = 1.0;
            for s in &splats {
                let d = pix - s.mean2d;
                let q = s.conic[(0, 0)] * d[0] * d[0]
                    + (s.conic[(0, 1)] + s.conic[(1, 0)]) * d[0] * d[1]
                    + s.conic[(1, 1)] * d[1] * d[1];
                if q > cutoff {
                    continue;
                }
                if t > params.visibility_transmittance {
                    oracle.insert(s.id);
                }
                t *= 1.0 - s.opacity * (-0.5 * q).exp();
                if t < params.min_transmittance {
                    break;
                }
            }
        }
    }
    assert_eq!(vis, oracle);
}
