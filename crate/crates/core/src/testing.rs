//! Independent reference implementations and scene generators used by the
//! test and acceptance suites. Everything here re-derives results from first
//! principles rather than calling into the production rasterizer internals.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gaussians::{logit, Gaussian, GaussianMap, KeyframeId};
use crate::geometry::{Intrinsics, Pose};
use crate::grid::{ColorImage, DepthMap, Grid};
use crate::render::{GradientBuffer, RenderParams};

/// Untiled per-pixel compositing over all Gaussians with plain matrix math.
/// Applies the same density cutoff, opacity caps and early stop as the
/// production renderer — those are part of the rendered function — but no
/// tiling and no shared projection code.
pub fn reference_render(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    exposure: (f64, f64),
    params: &RenderParams,
) -> (ColorImage, DepthMap, DepthMap) {
    struct Flat {
        id: u64,
        mean2d: Vector2<f64>,
        conic: Matrix2<f64>,
        z: f64,
        opacity: f64,
        color: Vector3<f64>,
    }

    let rot_w2c = pose.rotation.to_rotation_matrix().into_inner().transpose();
    let t_w2c = -(rot_w2c * pose.translation);
    let mut flats: Vec<Flat> = Vec::new();
    for g in map.gaussians() {
        let p = rot_w2c * g.mean + t_w2c;
        if p[2] <= params.z_near {
            continue;
        }
        let u = k.fx * p[0] / p[2] + k.cx;
        let v = k.fy * p[1] / p[2] + k.cy;
        let j = Matrix2x3f(k, &p);
        let r = g.rotation.to_rotation_matrix().into_inner();
        let s = g.log_scale.map(f64::exp);
        let ss = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
        let sigma = r * ss * r.transpose();
        let sigma_cam = rot_w2c * sigma * rot_w2c.transpose();
        let mut cov = j * sigma_cam * j.transpose();
        cov[(0, 0)] += params.dilation;
        cov[(1, 1)] += params.dilation;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if det <= 0.0 {
            continue;
        }
        let tr = cov[(0, 0)] + cov[(1, 1)];
        let lam_max = 0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt();
        let radius = params.sigma_cutoff * lam_max.sqrt();
        if u + radius < 0.0
            || u - radius > (k.width - 1) as f64
            || v + radius < 0.0
            || v - radius > (k.height - 1) as f64
        {
            continue;
        }
        let conic =
            Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        flats.push(Flat {
            id: g.id,
            mean2d: Vector2::new(u, v),
            conic,
            z: p[2],
            opacity: sigmoid(g.logit_opacity).clamp(params.opacity_cap, 1.0 - params.opacity_cap),
            color: g.color,
        });
    }
    flats.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.id.cmp(&b.id)));

    let cutoff_q = params.sigma_cutoff * params.sigma_cutoff;
    let mut color = Grid::filled(k.width, k.height, Vector3::zeros());
    let mut depth = Grid::filled(k.width, k.height, 0.0);
    let mut alpha = Grid::filled(k.width, k.height, 0.0);
    for py in 0..k.height {
        for px in 0..k.width {
            let pix = Vector2::new(px as f64, py as f64);
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            let mut d = 0.0;
            let mut a = 0.0;
            for f in &flats {
                let o = pix - f.mean2d;
                let q = f.conic[(0, 0)] * o[0] * o[0]
                    + (f.conic[(0, 1)] + f.conic[(1, 0)]) * o[0] * o[1]
                    + f.conic[(1, 1)] * o[1] * o[1];
                if q > cutoff_q {
                    continue;
                }
                let al = f.opacity * (-0.5 * q).exp();
                let w = al * t;
                c += f.color * w;
                d += f.z * w;
                a += w;
                t *= 1.0 - al;
                if t < params.min_transmittance {
                    break;
                }
            }
            *color.get_mut(px, py) = c;
            *depth.get_mut(px, py) = d;
            *alpha.get_mut(px, py) = a;
        }
    }
    let exposed = color.map(|c| c.map(|v| (exposure.0 * v + exposure.1).clamp(0.0, 1.0)));
    (exposed, depth, alpha)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[allow(non_snake_case)]
fn Matrix2x3f(k: &Intrinsics, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    nalgebra::Matrix2x3::new(
        k.fx / p[2],
        0.0,
        -k.fx * p[0] / (p[2] * p[2]),
        0.0,
        k.fy / p[2],
        -k.fy * p[1] / (p[2] * p[2]),
    )
}

/// A randomly generated scene suitable for finite-difference checks.
pub struct FdScene {
    pub map: GaussianMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub exposure: (f64, f64),
    pub d_color: ColorImage,
    pub d_depth: DepthMap,
}

/// Random scene that stays away from the rasterizer's non-smooth points
/// (density cutoff boundary, early-stop threshold, opacity caps, color
/// clamp), so central differences are valid. Resamples until the margins
/// hold.
pub fn sample_fd_scene(seed: u64, max_gaussians: usize, width: usize, height: usize) -> FdScene {
    let params = RenderParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intrinsics = Intrinsics::new(
        width as f64 * 1.2,
        width as f64 * 1.2,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
    );
    for attempt in 0..200 {
        let n = rng.random_range(2..=max_gaussians.max(2));
        let mut map = GaussianMap::new();
        for _ in 0..n {
            let z = rng.random_range(1.5..4.0);
            let fov_x = z * (width as f64 * 0.45) / intrinsics.fx;
            let fov_y = z * (height as f64 * 0.45) / intrinsics.fy;
            push_raw(
                &mut map,
                Gaussian {
                    id: 0,
                    mean: Vector3::new(
                        rng.random_range(-fov_x..fov_x),
                        rng.random_range(-fov_y..fov_y),
                        z,
                    ),
                    rotation: nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )),
                    log_scale: Vector3::new(
                        rng.random_range(-3.2f64..-1.6).exp().ln(),
                        rng.random_range(-3.2f64..-1.6).exp().ln(),
                        rng.random_range(-3.2f64..-1.6).exp().ln(),
                    ),
                    logit_opacity: rng.random_range(-2.5..1.5),
                    color: Vector3::new(
                        rng.random_range(0.1..0.85),
                        rng.random_range(0.1..0.85),
                        rng.random_range(0.1..0.85),
                    ),
                    anchor_kf: KeyframeId(0),
                    birth_kf: KeyframeId(0),
                },
            );
        }
        let pose = Pose::identity();
        if !fd_margins_hold(&map, &pose, &intrinsics, &params) {
            let _ = attempt;
            continue;
        }
        let exposure = (rng.random_range(0.9..1.05), rng.random_range(0.02..0.05));
        let d_color = Grid::from_fn(width, height, |_, _| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        });
        let d_depth = Grid::from_fn(width, height, |_, _| rng.random_range(-1.0..1.0));
        return FdScene {
            map,
            pose,
            intrinsics,
            exposure,
            d_color,
            d_depth,
        };
    }
    panic!("could not sample a kink-free scene");
}

fn push_raw(map: &mut GaussianMap, g: Gaussian) {
    // Anchoring machinery is irrelevant for synthetic scenes; go through the
    // public surface with a dedicated insert.
    map.insert_raw(g);
}

/// True when every (pixel, splat) pair stays clear of the 3σ boundary and the
/// per-pixel final transmittance stays clear of the early-stop threshold.
pub fn fd_margins_hold(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    params: &RenderParams,
) -> bool {
    let cutoff_q = params.sigma_cutoff * params.sigma_cutoff;
    let splats = crate::render::project_splats(map, pose, k, params);
    if splats.len() != map.len() {
        // A Gaussian near the cull boundary is itself a kink risk.
        return false;
    }
    for py in 0..k.height {
        for px in 0..k.width {
            let pix = Vector2::new(px as f64, py as f64);
            let mut t = 1.0;
            for s in &splats {
                let d = pix - s.mean2d;
                let q = s.conic[(0, 0)] * d[0] * d[0]
                    + (s.conic[(0, 1)] + s.conic[(1, 0)]) * d[0] * d[1]
                    + s.conic[(1, 1)] * d[1] * d[1];
                if (q - cutoff_q).abs() < 0.05 {
                    return false;
                }
                if q > cutoff_q {
                    continue;
                }
                t *= 1.0 - s.opacity * (-0.5 * q).exp();
            }
            if t < params.min_transmittance * 5.0 {
                return false;
            }
        }
    }
    true
}

/// Scalar probe loss `Σ_px (d_color·C + d_depth·D)` for finite differences.
pub fn probe_loss(scene: &FdScene, map: &GaussianMap, params: &RenderParams) -> f64 {
    let out = crate::render::render(map, &scene.pose, &scene.intrinsics, scene.exposure, params);
    let mut loss = 0.0;
    for (x, y, c) in out.color.pixels() {
        loss += scene.d_color.get(x, y).dot(c);
        loss += scene.d_depth.get(x, y) * out.depth.get(x, y);
    }
    loss
}

fn probe_loss_exposure(scene: &FdScene, exposure: (f64, f64), params: &RenderParams) -> f64 {
    let out = crate::render::render(&scene.map, &scene.pose, &scene.intrinsics, exposure, params);
    let mut loss = 0.0;
    for (x, y, c) in out.color.pixels() {
        loss += scene.d_color.get(x, y).dot(c);
        loss += scene.d_depth.get(x, y) * out.depth.get(x, y);
    }
    loss
}

/// Central finite differences of the probe loss with respect to every
/// Gaussian attribute and the exposure pair.
pub fn finite_difference_gradients(scene: &FdScene, h: f64, params: &RenderParams) -> GradientBuffer {
    let mut fd = GradientBuffer::zeros(scene.map.len());
    let eval = |map: &GaussianMap| probe_loss(scene, map, params);
    for i in 0..scene.map.len() {
        for axis in 0..3 {
            // Mean.
            let mut p = scene.map.clone();
            p.gaussians_mut()[i].mean[axis] += h;
            let mut m = scene.map.clone();
            m.gaussians_mut()[i].mean[axis] -= h;
            fd.d_mean[i][axis] = (eval(&p) - eval(&m)) / (2.0 * h);

            // Rotation through the left tangent perturbation.
            let mut delta = Vector3::zeros();
            delta[axis] = h;
            let mut p = scene.map.clone();
            {
                let g = &mut p.gaussians_mut()[i];
                g.rotation = nalgebra::UnitQuaternion::from_scaled_axis(delta) * g.rotation;
            }
            let mut m = scene.map.clone();
            {
                let g = &mut m.gaussians_mut()[i];
                g.rotation = nalgebra::UnitQuaternion::from_scaled_axis(-delta) * g.rotation;
            }
            fd.d_rotation[i][axis] = (eval(&p) - eval(&m)) / (2.0 * h);

            // Log-scale.
            let mut p = scene.map.clone();
            p.gaussians_mut()[i].log_scale[axis] += h;
            let mut m = scene.map.clone();
            m.gaussians_mut()[i].log_scale[axis] -= h;
            fd.d_log_scale[i][axis] = (eval(&p) - eval(&m)) / (2.0 * h);

            // Color.
            let mut p = scene.map.clone();
            p.gaussians_mut()[i].color[axis] += h;
            let mut m = scene.map.clone();
            m.gaussians_mut()[i].color[axis] -= h;
            fd.d_color[i][axis] = (eval(&p) - eval(&m)) / (2.0 * h);
        }
        let mut p = scene.map.clone();
        p.gaussians_mut()[i].logit_opacity += h;
        let mut m = scene.map.clone();
        m.gaussians_mut()[i].logit_opacity -= h;
        fd.d_logit_opacity[i] = (eval(&p) - eval(&m)) / (2.0 * h);
    }
    let (a, b) = scene.exposure;
    fd.d_exposure.0 = (probe_loss_exposure(scene, (a + h, b), params)
        - probe_loss_exposure(scene, (a - h, b), params))
        / (2.0 * h);
    fd.d_exposure.1 = (probe_loss_exposure(scene, (a, b + h), params)
        - probe_loss_exposure(scene, (a, b - h), params))
        / (2.0 * h);
    fd
}

/// Relative-or-absolute agreement used by the gradient suites.
pub fn grad_close(analytic: f64, fd: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff < abs || diff < rel * analytic.abs().max(fd.abs())
}

/// Compare a full gradient buffer; returns the worst offender if any entry
/// disagrees.
pub fn compare_gradients(
    analytic: &GradientBuffer,
    fd: &GradientBuffer,
    rel: f64,
    abs: f64,
) -> Result<(), String> {
    let check = |name: &str, i: usize, a: f64, f: f64| -> Result<(), String> {
        if grad_close(a, f, rel, abs) {
            Ok(())
        } else {
            Err(format!("{name}[{i}]: analytic {a} vs fd {f}"))
        }
    };
    for i in 0..analytic.d_mean.len() {
        for axis in 0..3 {
            check("d_mean", i, analytic.d_mean[i][axis], fd.d_mean[i][axis])?;
            check(
                "d_rotation",
                i,
                analytic.d_rotation[i][axis],
                fd.d_rotation[i][axis],
            )?;
            check(
                "d_log_scale",
                i,
                analytic.d_log_scale[i][axis],
                fd.d_log_scale[i][axis],
            )?;
            check("d_color", i, analytic.d_color[i][axis], fd.d_color[i][axis])?;
        }
        check(
            "d_logit_opacity",
            i,
            analytic.d_logit_opacity[i],
            fd.d_logit_opacity[i],
        )?;
    }
    check("d_exposure.a", 0, analytic.d_exposure.0, fd.d_exposure.0)?;
    check("d_exposure.b", 0, analytic.d_exposure.1, fd.d_exposure.1)?;
    Ok(())
}

/// Random scene for compositing-oracle comparisons; kinks are fine here.
pub fn sample_composite_scene(seed: u64, max_gaussians: usize, width: usize, height: usize) -> (GaussianMap, Pose, Intrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intrinsics = Intrinsics::new(
        width as f64,
        width as f64,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
    );
    let n = rng.random_range(1..=max_gaussians.max(1));
    let mut map = GaussianMap::new();
    for _ in 0..n {
        let z = rng.random_range(0.5..6.0);
        map.insert_raw(Gaussian {
            id: 0,
            mean: Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.5..1.5),
                z,
            ),
            rotation: nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )),
            log_scale: Vector3::new(
                rng.random_range(-4.0..-0.5),
                rng.random_range(-4.0..-0.5),
                rng.random_range(-4.0..-0.5),
            ),
            logit_opacity: rng.random_range(-4.0..4.0),
            color: Vector3::new(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ),
            anchor_kf: KeyframeId(0),
            birth_kf: KeyframeId(0),
        });
    }
    let pose = Pose::from_parts(
        Vector3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        ),
        Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ),
    );
    (map, pose, intrinsics)
}

/// Uniform opacity-0.5 logit helper for hand-built scenes.
pub fn opacity_logit(o: f64) -> f64 {
    logit(o)
}
