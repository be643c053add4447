//! Differentiable forward splatting of the Gaussian map and the analytic
//! adjoint used for map optimization.
//!
//! Forward: project every Gaussian to an image-plane Gaussian (mean, 2x2
//! covariance, camera depth), sort by depth, bin into tiles and composite
//! front-to-back. Backward: re-walk each pixel's contribution list and push
//! the loss adjoints through compositing, the 2D density and the projection
//! back onto every Gaussian attribute and the exposure pair.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::gaussians::{Gaussian, GaussianMap};
use crate::geometry::{Intrinsics, Pose};
use crate::grid::{ColorImage, DepthMap, Grid};

/// Rasterization constants. The dilation and cutoffs are part of the
/// definition of the rendered function, so the brute-force oracle in the
/// tests uses the same values.
#[derive(Clone, Copy, Debug)]
pub struct RenderParams {
    pub tile_size: usize,
    /// Evaluate a splat only within this many standard deviations of its 2D
    /// mean.
    pub sigma_cutoff: f64,
    /// Stop compositing a pixel once transmittance drops below this.
    pub min_transmittance: f64,
    /// Near-plane cull distance in meters.
    pub z_near: f64,
    /// Added to the 2D covariance diagonal (px²).
    pub dilation: f64,
    /// Opacities are kept inside [cap, 1-cap] during compositing.
    pub opacity_cap: f64,
    /// Transmittance bound defining per-frame visibility.
    pub visibility_transmittance: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            tile_size: 16,
            sigma_cutoff: 3.0,
            min_transmittance: 1e-4,
            z_near: 0.01,
            dilation: 0.3,
            opacity_cap: 1e-4,
            visibility_transmittance: 0.5,
        }
    }
}

/// A Gaussian projected into the image plane.
#[derive(Clone, Debug)]
pub struct Splat {
    /// Index into the map's Gaussian slice.
    pub index: usize,
    pub id: u64,
    pub mean2d: Vector2<f64>,
    /// Dilated 2D covariance.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-frame depth of the mean.
    pub z: f64,
    /// Camera-frame mean.
    pub p_cam: Vector3<f64>,
    pub radius: f64,
    pub opacity: f64,
    /// Whether the opacity hit the compositing cap (kills its gradient).
    pub opacity_capped: bool,
    pub color: Vector3<f64>,
}

/// Splatting projection of one Gaussian: `Σ' = J W Σ Wᵀ Jᵀ + dilation`,
/// `μ' = π(K, ω⁻¹μ)`. Returns `None` when culled.
pub fn splat_project(
    g: &Gaussian,
    pose: &Pose,
    intrinsics: &Intrinsics,
    params: &RenderParams,
) -> Option<(Vector2<f64>, Matrix2<f64>, f64)> {
    let w2c = pose.inverse();
    project_gaussian(g, 0, &w2c, intrinsics, params).map(|s| (s.mean2d, s.cov2d, s.z))
}

fn project_gaussian(
    g: &Gaussian,
    index: usize,
    world_to_cam: &Pose,
    intrinsics: &Intrinsics,
    params: &RenderParams,
) -> Option<Splat> {
    let p_cam = world_to_cam.transform_point(&g.mean);
    let z = p_cam[2];
    if z <= params.z_near {
        return None;
    }
    let (u, v, _) = intrinsics.project(&p_cam).expect("guarded depth");
    let j = intrinsics.projection_jacobian(&p_cam);
    let w = world_to_cam.rotation_matrix();
    let cov_cam = w * g.covariance() * w.transpose();
    let mut cov2d = j * cov_cam * j.transpose();
    cov2d[(0, 0)] += params.dilation;
    cov2d[(1, 1)] += params.dilation;

    let tr = cov2d[(0, 0)] + cov2d[(1, 1)];
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if det <= 0.0 {
        return None;
    }
    let eig_max = 0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt();
    let radius = params.sigma_cutoff * eig_max.sqrt();

    let (w_px, h_px) = (intrinsics.width as f64, intrinsics.height as f64);
    if u + radius < 0.0 || u - radius > w_px - 1.0 || v + radius < 0.0 || v - radius > h_px - 1.0 {
        return None;
    }

    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let raw_opacity = g.opacity();
    let opacity = raw_opacity.clamp(params.opacity_cap, 1.0 - params.opacity_cap);
    Some(Splat {
        index,
        id: g.id,
        mean2d: Vector2::new(u, v),
        cov2d,
        conic,
        z,
        p_cam,
        radius,
        opacity,
        opacity_capped: raw_opacity != opacity,
        color: g.color,
    })
}

/// Depth-sorted splats for a view. Ties break on the Gaussian id so the
/// composite does not depend on map order.
pub fn project_splats(
    map: &GaussianMap,
    pose: &Pose,
    intrinsics: &Intrinsics,
    params: &RenderParams,
) -> Vec<Splat> {
    let w2c = pose.inverse();
    let mut splats: Vec<Splat> = map
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, &w2c, intrinsics, params))
        .collect();
    splats.sort_unstable_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.id.cmp(&b.id)));
    splats
}

struct TileBins {
    tiles_x: usize,
    tiles_y: usize,
    tile_size: usize,
    /// Per tile, indices into the sorted splat list (order preserved).
    bins: Vec<Vec<u32>>,
}

fn bin_splats(splats: &[Splat], intrinsics: &Intrinsics, params: &RenderParams) -> TileBins {
    let ts = params.tile_size;
    let tiles_x = intrinsics.width.div_ceil(ts);
    let tiles_y = intrinsics.height.div_ceil(ts);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x0 = ((s.mean2d[0] - s.radius).floor().max(0.0) as usize) / ts;
        let y0 = ((s.mean2d[1] - s.radius).floor().max(0.0) as usize) / ts;
        let x1 = (((s.mean2d[0] + s.radius).ceil() as usize).min(intrinsics.width - 1)) / ts;
        let y1 = (((s.mean2d[1] + s.radius).ceil() as usize).min(intrinsics.height - 1)) / ts;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    TileBins {
        tiles_x,
        tiles_y,
        tile_size: ts,
        bins,
    }
}

/// Forward render result.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// Exposure-compensated color, clamped to [0, 1].
    pub color: ColorImage,
    /// Composited color before exposure.
    pub raw_color: ColorImage,
    /// Composited camera-depth.
    pub depth: DepthMap,
    /// Accumulated opacity.
    pub alpha: DepthMap,
    /// Per-Gaussian visibility (indexed like the map's Gaussian slice).
    pub visible: Vec<bool>,
}

impl RenderOutput {
    /// Ids of the Gaussians visible in this view.
    pub fn visible_ids(&self, map: &GaussianMap) -> std::collections::BTreeSet<u64> {
        self.visible
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| map.gaussians()[i].id)
            .collect()
    }
}

/// Front-to-back composite of the map from a camera pose, with optional
/// affine exposure `(a, b)` applied to the color.
pub fn render(
    map: &GaussianMap,
    pose: &Pose,
    intrinsics: &Intrinsics,
    exposure: (f64, f64),
    params: &RenderParams,
) -> RenderOutput {
    let splats = project_splats(map, pose, intrinsics, params);
    let bins = bin_splats(&splats, intrinsics, params);
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut raw_color = Grid::filled(w, h, Vector3::zeros());
    let mut depth = Grid::filled(w, h, 0.0);
    let mut alpha = Grid::filled(w, h, 0.0);
    let mut visible = vec![false; map.len()];

    let cutoff_q = params.sigma_cutoff * params.sigma_cutoff;
    for ty in 0..bins.tiles_y {
        for tx in 0..bins.tiles_x {
            let list = &bins.bins[ty * bins.tiles_x + tx];
            if list.is_empty() {
                continue;
            }
            let y_end = ((ty + 1) * bins.tile_size).min(h);
            let x_end = ((tx + 1) * bins.tile_size).min(w);
            for py in ty * bins.tile_size..y_end {
                for px in tx * bins.tile_size..x_end {
                    let pix = Vector2::new(px as f64, py as f64);
                    let mut transmittance = 1.0;
                    let mut c_acc = Vector3::zeros();
                    let mut d_acc = 0.0;
                    let mut a_acc = 0.0;
                    for &si in list {
                        let s = &splats[si as usize];
                        let d = pix - s.mean2d;
                        let q = s.conic[(0, 0)] * d[0] * d[0]
                            + (s.conic[(0, 1)] + s.conic[(1, 0)]) * d[0] * d[1]
                            + s.conic[(1, 1)] * d[1] * d[1];
                        if q > cutoff_q {
                            continue;
                        }
                        let alpha_i = s.opacity * (-0.5 * q).exp();
                        if transmittance > params.visibility_transmittance {
                            visible[s.index] = true;
                        }
                        let weight = alpha_i * transmittance;
                        c_acc += s.color * weight;
                        d_acc += s.z * weight;
                        a_acc += weight;
                        transmittance *= 1.0 - alpha_i;
                        if transmittance < params.min_transmittance {
                            break;
                        }
                    }
                    *raw_color.get_mut(px, py) = c_acc;
                    *depth.get_mut(px, py) = d_acc;
                    *alpha.get_mut(px, py) = a_acc;
                }
            }
        }
    }

    let (a, b) = exposure;
    let color = raw_color.map(|c| c.map(|v| (a * v + b).clamp(0.0, 1.0)));
    RenderOutput {
        color,
        raw_color,
        depth,
        alpha,
        visible,
    }
}

/// Per-Gaussian gradients plus the per-frame exposure pair.
#[derive(Clone, Debug)]
pub struct GradientBuffer {
    pub d_mean: Vec<Vector3<f64>>,
    pub d_rotation: Vec<Vector3<f64>>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_logit_opacity: Vec<f64>,
    pub d_color: Vec<Vector3<f64>>,
    /// Screen-space positional gradient per Gaussian (densification signal).
    pub d_mean2d: Vec<Vector2<f64>>,
    pub d_exposure: (f64, f64),
}

impl GradientBuffer {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mean: vec![Vector3::zeros(); n],
            d_rotation: vec![Vector3::zeros(); n],
            d_log_scale: vec![Vector3::zeros(); n],
            d_logit_opacity: vec![0.0; n],
            d_color: vec![Vector3::zeros(); n],
            d_mean2d: vec![Vector2::zeros(); n],
            d_exposure: (0.0, 0.0),
        }
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for i in 0..self.d_mean.len() {
            self.d_mean[i] += other.d_mean[i];
            self.d_rotation[i] += other.d_rotation[i];
            self.d_log_scale[i] += other.d_log_scale[i];
            self.d_logit_opacity[i] += other.d_logit_opacity[i];
            self.d_color[i] += other.d_color[i];
            self.d_mean2d[i] += other.d_mean2d[i];
        }
        self.d_exposure.0 += other.d_exposure.0;
        self.d_exposure.1 += other.d_exposure.1;
    }

    pub fn is_finite(&self) -> bool {
        self.d_mean.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_logit_opacity.iter().all(|x| x.is_finite())
            && self.d_color.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_exposure.0.is_finite()
            && self.d_exposure.1.is_finite()
    }
}

struct Contribution {
    splat: u32,
    alpha: f64,
    t_before: f64,
    gauss_density: f64,
    offset: Vector2<f64>,
}

/// Analytic gradients of `Σ_px (dL/dC·C + dL/dD·D)` with respect to every
/// Gaussian attribute and the exposure pair, for the same forward inputs.
pub fn render_gradients(
    map: &GaussianMap,
    pose: &Pose,
    intrinsics: &Intrinsics,
    exposure: (f64, f64),
    d_color_adj: &ColorImage,
    d_depth_adj: &DepthMap,
    params: &RenderParams,
) -> GradientBuffer {
    let splats = project_splats(map, pose, intrinsics, params);
    let bins = bin_splats(&splats, intrinsics, params);
    let (w, h) = (intrinsics.width, intrinsics.height);
    let (exp_a, exp_b) = exposure;
    let cutoff_q = params.sigma_cutoff * params.sigma_cutoff;

    // 2D accumulators per splat; chained through the projection once at the
    // end.
    let mut acc_mean2d = vec![Vector2::<f64>::zeros(); splats.len()];
    let mut acc_cov2d = vec![Matrix2::<f64>::zeros(); splats.len()];
    let mut acc_z = vec![0.0f64; splats.len()];
    let mut acc_color = vec![Vector3::<f64>::zeros(); splats.len()];
    let mut acc_opacity = vec![0.0f64; splats.len()];
    // Pixels no splat touches still expose b through clamp(a·0 + b): seed db
    // with the all-pixels sum assuming raw = 0 and correct visited pixels
    // below.
    let b_in_range = (0.0..=1.0).contains(&exp_b);
    let mut d_exp_a = 0.0;
    let mut d_exp_b = if b_in_range {
        d_color_adj.as_slice().iter().map(|c| c.sum()).sum()
    } else {
        0.0
    };

    let mut contribs: Vec<Contribution> = Vec::with_capacity(64);
    for ty in 0..bins.tiles_y {
        for tx in 0..bins.tiles_x {
            let list = &bins.bins[ty * bins.tiles_x + tx];
            if list.is_empty() {
                continue;
            }
            let y_end = ((ty + 1) * bins.tile_size).min(h);
            let x_end = ((tx + 1) * bins.tile_size).min(w);
            for py in ty * bins.tile_size..y_end {
                for px in tx * bins.tile_size..x_end {
                    let pix = Vector2::new(px as f64, py as f64);
                    contribs.clear();
                    let mut transmittance = 1.0;
                    let mut raw = Vector3::zeros();
                    for &si in list {
                        let s = &splats[si as usize];
                        let d = pix - s.mean2d;
                        let q = s.conic[(0, 0)] * d[0] * d[0]
                            + (s.conic[(0, 1)] + s.conic[(1, 0)]) * d[0] * d[1]
                            + s.conic[(1, 1)] * d[1] * d[1];
                        if q > cutoff_q {
                            continue;
                        }
                        let g_density = (-0.5 * q).exp();
                        let alpha_i = s.opacity * g_density;
                        contribs.push(Contribution {
                            splat: si,
                            alpha: alpha_i,
                            t_before: transmittance,
                            gauss_density: g_density,
                            offset: d,
                        });
                        raw += s.color * (alpha_i * transmittance);
                        transmittance *= 1.0 - alpha_i;
                        if transmittance < params.min_transmittance {
                            break;
                        }
                    }
                    // Exposure chain: clamp zeroes saturated channels.
                    let adj_final = d_color_adj.get(px, py);
                    let mut adj_raw = Vector3::zeros();
                    for ch in 0..3 {
                        let exposed = exp_a * raw[ch] + exp_b;
                        if (0.0..=1.0).contains(&exposed) {
                            adj_raw[ch] = exp_a * adj_final[ch];
                            d_exp_a += adj_final[ch] * raw[ch];
                            if !b_in_range {
                                d_exp_b += adj_final[ch];
                            }
                        } else if b_in_range {
                            d_exp_b -= adj_final[ch];
                        }
                    }
                    if contribs.is_empty() {
                        continue;
                    }
                    let adj_depth = *d_depth_adj.get(px, py);

                    // Reverse walk with suffix accumulators: S = Σ_{j>i} of
                    // the composited quantities after i.
                    let mut suffix_color = Vector3::zeros();
                    let mut suffix_depth = 0.0;
                    for c in contribs.iter().rev() {
                        let s = &splats[c.splat as usize];
                        let weight = c.alpha * c.t_before;
                        let one_minus = 1.0 - c.alpha;

                        acc_color[c.splat as usize] += adj_raw * weight;
                        acc_z[c.splat as usize] += adj_depth * weight;

                        let d_alpha = adj_raw.dot(&(s.color * c.t_before - suffix_color / one_minus))
                            + adj_depth * (s.z * c.t_before - suffix_depth / one_minus);

                        acc_opacity[c.splat as usize] += d_alpha * c.gauss_density;
                        let d_density = d_alpha * s.opacity;
                        // G = exp(-q/2): ∂G/∂μ' = G·(conic·d), ∂G/∂Σ' =
                        // G/2·(conic·d)(conic·d)ᵀ.
                        let cd = s.conic * c.offset;
                        acc_mean2d[c.splat as usize] += cd * (d_density * c.gauss_density);
                        acc_cov2d[c.splat as usize] +=
                            cd * cd.transpose() * (0.5 * d_density * c.gauss_density);

                        suffix_color += s.color * weight;
                        suffix_depth += s.z * weight;
                    }
                }
            }
        }
    }

    // Chain the per-splat 2D adjoints back to the 3D attributes.
    let mut buffer = GradientBuffer::zeros(map.len());
    buffer.d_exposure = (d_exp_a, d_exp_b);
    let w2c = pose.inverse();
    let rot_w2c = w2c.rotation_matrix();
    for (si, s) in splats.iter().enumerate() {
        let g = &map.gaussians()[s.index];
        let d_mean2d = acc_mean2d[si];
        let d_cov2d = acc_cov2d[si];
        let d_z = acc_z[si];
        if d_mean2d == Vector2::zeros()
            && d_cov2d == Matrix2::zeros()
            && d_z == 0.0
            && acc_color[si] == Vector3::zeros()
            && acc_opacity[si] == 0.0
        {
            continue;
        }

        buffer.d_color[s.index] += acc_color[si];
        buffer.d_mean2d[s.index] += d_mean2d;
        if !s.opacity_capped {
            let o = s.opacity;
            buffer.d_logit_opacity[s.index] += acc_opacity[si] * o * (1.0 - o);
        }

        let j = intrinsics.projection_jacobian(&s.p_cam);
        let sigma_cam = rot_w2c * g.covariance() * rot_w2c.transpose();

        // Mean: through μ' = π(p_cam), through ẑ = p_cam.z, and through the
        // p_cam-dependence of the affine Jacobian in Σ'.
        let mut d_p_cam: Vector3<f64> = j.transpose() * d_mean2d;
        d_p_cam[2] += d_z;
        let (x, y, z) = (s.p_cam[0], s.p_cam[1], s.p_cam[2]);
        let iz2 = 1.0 / (z * z);
        let iz3 = iz2 / z;
        let dj_dx = Matrix2x3::new(0.0, 0.0, -intrinsics.fx * iz2, 0.0, 0.0, 0.0);
        let dj_dy = Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 0.0, -intrinsics.fy * iz2);
        let dj_dz = Matrix2x3::new(
            -intrinsics.fx * iz2,
            0.0,
            2.0 * intrinsics.fx * x * iz3,
            0.0,
            -intrinsics.fy * iz2,
            2.0 * intrinsics.fy * y * iz3,
        );
        for (k, dj) in [dj_dx, dj_dy, dj_dz].iter().enumerate() {
            let b = dj * sigma_cam * j.transpose();
            // d<G,Σ'>/dp_k with symmetric adjoint: 2·<G, (∂J)Σ Jᵀ>.
            d_p_cam[k] += 2.0 * (d_cov2d.component_mul(&b)).sum();
        }
        buffer.d_mean[s.index] += rot_w2c.transpose() * d_p_cam;

        // Covariance: Σ' = J Σcam Jᵀ, Σcam = W Σ Wᵀ.
        let d_sigma_cam = j.transpose() * d_cov2d * j;
        let d_sigma = rot_w2c.transpose() * d_sigma_cam * rot_w2c;

        // Rotation tangent (left perturbation R ← exp(δ)·R):
        // dΣ/dδ_k = e_k^ Σ - Σ e_k^.
        let sigma = g.covariance();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            let hat = Matrix3::new(0.0, -e[2], e[1], e[2], 0.0, -e[0], -e[1], e[0], 0.0);
            let d_sigma_k = hat * sigma - sigma * hat;
            buffer.d_rotation[s.index][k] += (d_sigma.component_mul(&d_sigma_k)).sum();
        }

        // Scale: Σ = Σ_k s_k² r_k r_kᵀ → dΣ/d(log s_k) = 2 s_k² r_k r_kᵀ.
        let r = g.rotation.to_rotation_matrix().into_inner();
        let sc = g.scale();
        for k in 0..3 {
            let col = r.column(k);
            let quad = col.transpose() * d_sigma * col;
            buffer.d_log_scale[s.index][k] += 2.0 * sc[k] * sc[k] * quad[(0, 0)];
        }
    }
    buffer
}

#[cfg(test)]
mod tests;
