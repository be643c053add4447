use nalgebra::{UnitQuaternion, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slam_core::gaussians::{DensifyConfig, Gaussian, GaussianMap, KeyframeId};
use slam_core::geometry::{Intrinsics, Pose};
use slam_core::grid::Grid;
use slam_core::mapping::*;
use slam_core::proxy::{ProxyDepth, ProxySource};
use slam_core::render::{render, RenderParams};

fn wall_map(rng: &mut StdRng, n_side: usize, spacing_scale: f64, logit: f64) -> GaussianMap {
    let mut map = GaussianMap::new();
    for iy in 0..n_side {
        for ix in 0..n_side {
            let x = (ix as f64 / (n_side - 1) as f64 - 0.5) * 2.4;
            let y = (iy as f64 / (n_side - 1) as f64 - 0.5) * 2.4;
            map.insert_raw(Gaussian {
                id: 0,
                mean: Vector3::new(x, y, 2.0 + rng.random_range(-0.02..0.02)),
                rotation: UnitQuaternion::identity(),
                log_scale: Vector3::repeat((2.4 / n_side as f64 * spacing_scale).ln()),
                logit_opacity: logit,
                color: Vector3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                anchor_kf: KeyframeId(0),
                birth_kf: KeyframeId(0),
            });
        }
    }
    map
}

fn main() {
    let k = Intrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32);
    let params = RenderParams::default();
    for (ss, lg) in [(0.8, 3.0), (0.5, 3.0), (0.5, 5.0), (0.35, 5.0)] {
        let mut rng = StdRng::seed_from_u64(3);
        let map_gt = wall_map(&mut rng, 12, ss, lg);
        let gt = render(&map_gt, &Pose::identity(), &k, (1.0, 0.0), &params);
        let proxy = ProxyDepth {
            depth: gt.depth.clone(),
            source: gt.alpha.map(|&a| if a >= 0.5 { ProxySource::Multiview } else { ProxySource::Invalid }),
        };
        let mut map = map_gt.clone();
        for g in map.gaussians_mut() {
            g.color = g.color.map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
        }
        let config = MappingConfig::default();
        let photo = |m: &GaussianMap| -> f64 {
            let out = render(m, &Pose::identity(), &k, (1.0, 0.0), &params);
            out.color.as_slice().iter().zip(gt.color.as_slice()).map(|(a, b)| (a - b).abs().sum()).sum::<f64>() * config.lambda / (32.0 * 32.0)
        };
        let before = photo(&map);
        let frames = [MapFrame { kf: KeyframeId(0), pose: Pose::identity(), image: &gt.color, proxy: &proxy, exposure: (1.0, 0.0) }];
        let mut optimizer = MapOptimizer::new();
        let mut it = 0u64;
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        optimize_map(&mut map, &frames, &mut optimizer, &config, &DensifyConfig::default(), &k, &params, 60, &mut it, false, false, &mut rng2);
        let after = photo(&map);
        println!("spacing_scale {ss} logit {lg}: photometric {before:.5} -> {after:.5} ratio {:.3}", after / before);
    }
}
