//! Gaussian-map optimization: covisibility keyframe window, the photometric
//! + geometric + scale-regularizer loss with exposure compensation, the
//! per-attribute adaptive optimizer, and the final refinement stage.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::gaussians::{DensifyConfig, GaussianMap, KeyframeId};
use crate::geometry::{Intrinsics, Pose};
use crate::grid::{ColorImage, DepthMap, Grid};
use crate::proxy::ProxyDepth;
use crate::render::{render, render_gradients, GradientBuffer, RenderOutput, RenderParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("keyframe {0} has no proxy depth")]
    MissingProxyDepth(KeyframeId),
}

/// Loss weights, optimizer rates and window policy.
#[derive(Clone, Debug)]
pub struct MappingConfig {
    /// Photometric weight λ; the geometric term gets 1-λ.
    pub lambda: f64,
    /// Isotropy regularizer weight.
    pub lambda_reg: f64,
    /// Iterations per mapping step.
    pub iterations: usize,
    pub lr_mean: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_exposure: f64,
    /// Window admission: IOU below this admits.
    pub kf_cov: f64,
    /// Window admission: translation above `kf_m · median depth` admits.
    pub kf_m: f64,
    /// Window eviction: overlap coefficient below this evicts.
    pub kf_c: f64,
    pub window_capacity: usize,
    /// Final refinement iterations.
    pub beta: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            lambda_reg: 10.0,
            iterations: 60,
            lr_mean: 1.6e-4,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_exposure: 1e-2,
            kf_cov: 0.95,
            kf_m: 0.04,
            kf_c: 0.3,
            window_capacity: 10,
            beta: 2000,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) {
        assert!((0.0..=1.0).contains(&self.lambda));
        assert!(self.lambda_reg >= 0.0);
        for lr in [
            self.lr_mean,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_color,
            self.lr_exposure,
        ] {
            assert!(lr > 0.0);
        }
        assert!(self.window_capacity >= 1);
    }
}

/// Everything the mapper needs from one keyframe.
#[derive(Clone, Debug)]
pub struct MapFrame<'a> {
    pub kf: KeyframeId,
    pub pose: Pose,
    pub image: &'a ColorImage,
    pub proxy: &'a ProxyDepth,
    pub exposure: (f64, f64),
}

/// Mapping window with cached per-frame visible-Gaussian sets.
#[derive(Clone, Debug, Default)]
pub struct KeyframeWindow {
    capacity: usize,
    entries: Vec<KeyframeId>,
    visibility: BTreeMap<KeyframeId, BTreeSet<u64>>,
}

fn iou(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn overlap_coefficient(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    let m = a.len().min(b.len());
    if m == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / m as f64
}

impl KeyframeWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
            visibility: BTreeMap::new(),
        }
    }

    pub fn entries(&self) -> &[KeyframeId] {
        &self.entries
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn visibility(&self, kf: KeyframeId) -> Option<&BTreeSet<u64>> {
        self.visibility.get(&kf)
    }

    /// Admission by covisibility with the newest member, eviction by overlap
    /// against the candidate, then the capacity bound (oldest first).
    /// `pose_of` must resolve every member plus the candidate.
    pub fn update(
        &mut self,
        candidate: KeyframeId,
        median_depth: f64,
        pose_of: &dyn Fn(KeyframeId) -> Pose,
        map: &GaussianMap,
        intrinsics: &Intrinsics,
        config: &MappingConfig,
        params: &RenderParams,
    ) -> (bool, Vec<KeyframeId>) {
        // Refresh visibility for everyone involved; poses and the map have
        // typically moved since the last mapping step.
        let mut vis = BTreeMap::new();
        for &kf in self.entries.iter().chain(std::iter::once(&candidate)) {
            let out = render(map, &pose_of(kf), intrinsics, (1.0, 0.0), params);
            vis.insert(kf, out.visible_ids(map));
        }

        let admitted = if let Some(&last) = self.entries.last() {
            let iou_last = iou(&vis[&candidate], &vis[&last]);
            let translation = (pose_of(candidate).translation - pose_of(last).translation).norm();
            iou_last < config.kf_cov || translation > config.kf_m * median_depth
        } else {
            true
        };
        if !admitted {
            return (false, Vec::new());
        }

        let mut evicted = Vec::new();
        self.entries.retain(|&kf| {
            let keep = overlap_coefficient(&vis[&candidate], &vis[&kf]) >= config.kf_c;
            if !keep {
                evicted.push(kf);
            }
            keep
        });
        self.entries.push(candidate);
        while self.entries.len() > self.capacity {
            evicted.push(self.entries.remove(0));
        }
        let live = self.entries.clone();
        self.visibility = vis;
        self.visibility.retain(|kf, _| live.contains(kf));
        (true, evicted)
    }
}

/// Per-frame adjoints produced by the loss.
pub struct FrameAdjoints {
    pub d_color: ColorImage,
    pub d_depth: DepthMap,
}

pub struct LossBundle {
    pub loss: f64,
    pub adjoints: Vec<FrameAdjoints>,
    /// d loss / d (a_k, b_k) per frame, same order as the input frames.
    pub d_exposure: Vec<(f64, f64)>,
    pub renders: Vec<RenderOutput>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Eq.-style mapping loss: per-keyframe L1 photometric on exposure-corrected
/// renders, L1 geometric against proxy depth over covered pixels, and the
/// per-Gaussian isotropy regularizer. Returns subgradient adjoints for
/// [`render_gradients`] and the exposure derivatives.
pub fn compute_loss(
    map: &GaussianMap,
    frames: &[MapFrame],
    config: &MappingConfig,
    intrinsics: &Intrinsics,
    params: &RenderParams,
) -> LossBundle {
    let mut loss = 0.0;
    let mut adjoints = Vec::with_capacity(frames.len());
    let mut d_exposure = Vec::with_capacity(frames.len());
    let mut renders = Vec::with_capacity(frames.len());

    for frame in frames {
        let out = render(map, &frame.pose, intrinsics, frame.exposure, params);
        let n_k = (intrinsics.width * intrinsics.height) as f64;
        let w_photo = config.lambda / n_k;
        let w_geo = (1.0 - config.lambda) / n_k;
        let (a, b) = frame.exposure;

        let mut d_color = Grid::filled(intrinsics.width, intrinsics.height, Vector3::zeros());
        let mut d_depth = Grid::filled(intrinsics.width, intrinsics.height, 0.0);
        let (mut da, mut db) = (0.0, 0.0);
        for y in 0..intrinsics.height {
            for x in 0..intrinsics.width {
                let rendered = out.color.get(x, y);
                let target = frame.image.get(x, y);
                let mut adj = Vector3::zeros();
                for ch in 0..3 {
                    let r = rendered[ch] - target[ch];
                    loss += w_photo * r.abs();
                    adj[ch] = w_photo * sign(r);
                    // Exposure chain on the unclamped channel.
                    let raw = out.raw_color.get(x, y)[ch];
                    let exposed = a * raw + b;
                    if (0.0..=1.0).contains(&exposed) {
                        da += adj[ch] * raw;
                        db += adj[ch];
                    }
                }
                *d_color.get_mut(x, y) = adj;

                if *out.alpha.get(x, y) >= 0.5 {
                    if let Some(proxy) = frame.proxy.valid_depth(x, y) {
                        let r = out.depth.get(x, y) - proxy;
                        loss += w_geo * r.abs();
                        *d_depth.get_mut(x, y) = w_geo * sign(r);
                    }
                }
            }
        }
        adjoints.push(FrameAdjoints { d_color, d_depth });
        d_exposure.push((da, db));
        renders.push(out);
    }

    if !map.is_empty() && config.lambda_reg > 0.0 {
        let w = config.lambda_reg / map.len() as f64;
        for g in map.gaussians() {
            let s = g.scale();
            let mean = (s[0] + s[1] + s[2]) / 3.0;
            loss += w * ((s[0] - mean).abs() + (s[1] - mean).abs() + (s[2] - mean).abs());
        }
    }

    LossBundle {
        loss,
        adjoints,
        d_exposure,
        renders,
    }
}

/// Gradient of the isotropy regularizer with respect to the log-scales.
fn scale_regularizer_gradient(map: &GaussianMap, lambda_reg: f64) -> Vec<Vector3<f64>> {
    let w = if map.is_empty() {
        0.0
    } else {
        lambda_reg / map.len() as f64
    };
    map.gaussians()
        .iter()
        .map(|g| {
            let s = g.scale();
            let mean = (s[0] + s[1] + s[2]) / 3.0;
            let signs = Vector3::new(sign(s[0] - mean), sign(s[1] - mean), sign(s[2] - mean));
            let sign_sum = signs.sum();
            Vector3::new(
                w * s[0] * (signs[0] - sign_sum / 3.0),
                w * s[1] * (signs[1] - sign_sum / 3.0),
                w * s[2] * (signs[2] - sign_sum / 3.0),
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct Adam<T> {
    m: T,
    v: T,
    t: u64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl Adam<Vector3<f64>> {
    fn step(&mut self, grad: &Vector3<f64>, lr: f64) -> Vector3<f64> {
        self.t += 1;
        self.m = self.m * ADAM_B1 + grad * (1.0 - ADAM_B1);
        self.v = self.v * ADAM_B2 + grad.component_mul(grad) * (1.0 - ADAM_B2);
        let mh = self.m / (1.0 - ADAM_B1.powi(self.t as i32));
        let vh = self.v / (1.0 - ADAM_B2.powi(self.t as i32));
        -Vector3::new(
            lr * mh[0] / (vh[0].sqrt() + ADAM_EPS),
            lr * mh[1] / (vh[1].sqrt() + ADAM_EPS),
            lr * mh[2] / (vh[2].sqrt() + ADAM_EPS),
        )
    }
}

impl Adam<f64> {
    fn step(&mut self, grad: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = self.m * ADAM_B1 + grad * (1.0 - ADAM_B1);
        self.v = self.v * ADAM_B2 + grad * grad * (1.0 - ADAM_B2);
        let mh = self.m / (1.0 - ADAM_B1.powi(self.t as i32));
        let vh = self.v / (1.0 - ADAM_B2.powi(self.t as i32));
        -lr * mh / (vh.sqrt() + ADAM_EPS)
    }
}

#[derive(Clone, Debug, Default)]
struct GaussianMoments {
    mean: Adam<Vector3<f64>>,
    rotation: Adam<Vector3<f64>>,
    scale: Adam<Vector3<f64>>,
    opacity: Adam<f64>,
    color: Adam<Vector3<f64>>,
}

/// Moment-accumulating per-attribute optimizer state, keyed by Gaussian id so
/// it survives densification and pruning.
#[derive(Clone, Debug, Default)]
pub struct MapOptimizer {
    gaussians: BTreeMap<u64, GaussianMoments>,
    exposures: BTreeMap<KeyframeId, (Adam<f64>, Adam<f64>)>,
}

impl MapOptimizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// One first-order update of every Gaussian attribute from the buffer;
    /// the mean rate is scaled by the scene extent.
    pub fn apply(&mut self, map: &mut GaussianMap, grads: &GradientBuffer, config: &MappingConfig) {
        let extent = map.scene_extent();
        for (i, g) in map.gaussians_mut().iter_mut().enumerate() {
            let state = self.gaussians.entry(g.id).or_default();
            g.mean += state.mean.step(&grads.d_mean[i], config.lr_mean * extent);
            let rot_step = state.rotation.step(&grads.d_rotation[i], config.lr_rotation);
            g.rotation =
                nalgebra::UnitQuaternion::from_scaled_axis(rot_step) * g.rotation;
            g.rotation.renormalize_fast();
            g.log_scale += state.scale.step(&grads.d_log_scale[i], config.lr_scale);
            g.logit_opacity += state
                .opacity
                .step(grads.d_logit_opacity[i], config.lr_opacity);
            g.color += state.color.step(&grads.d_color[i], config.lr_color);
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
        }
        // Drop states of pruned Gaussians once the map shrinks noticeably.
        if self.gaussians.len() > 2 * map.len() + 64 {
            let live: BTreeSet<u64> = map.gaussians().iter().map(|g| g.id).collect();
            self.gaussians.retain(|id, _| live.contains(id));
        }
    }

    pub fn apply_exposure(
        &mut self,
        kf: KeyframeId,
        exposure: (f64, f64),
        grad: (f64, f64),
        config: &MappingConfig,
    ) -> (f64, f64) {
        let (sa, sb) = self.exposures.entry(kf).or_default();
        (
            exposure.0 + sa.step(grad.0, config.lr_exposure),
            exposure.1 + sb.step(grad.1, config.lr_exposure),
        )
    }
}

pub struct OptimizeResult {
    pub loss_trace: Vec<f64>,
    /// Exposure values after optimization, same order as the input frames.
    pub exposures: Vec<(KeyframeId, (f64, f64))>,
    pub densify_added: usize,
    pub densify_removed: usize,
}

/// Batched map optimization over the window. Each iteration renders every
/// window frame, accumulates gradients, steps the optimizer, and runs the
/// densify/prune schedule against the shared global iteration counter.
#[allow(clippy::too_many_arguments)]
pub fn optimize_map(
    map: &mut GaussianMap,
    frames: &[MapFrame],
    optimizer: &mut MapOptimizer,
    config: &MappingConfig,
    densify: &DensifyConfig,
    intrinsics: &Intrinsics,
    params: &RenderParams,
    iterations: usize,
    global_iteration: &mut u64,
    window_full: bool,
    enable_densify: bool,
    rng: &mut impl Rng,
) -> OptimizeResult {
    let mut exposures: Vec<(KeyframeId, (f64, f64))> =
        frames.iter().map(|f| (f.kf, f.exposure)).collect();
    let mut trace = Vec::with_capacity(iterations);
    let mut added_total = 0;
    let mut removed_total = 0;

    for _ in 0..iterations {
        let framed: Vec<MapFrame> = frames
            .iter()
            .zip(&exposures)
            .map(|(f, (_, e))| MapFrame {
                exposure: *e,
                ..f.clone()
            })
            .collect();
        let bundle = compute_loss(map, &framed, config, intrinsics, params);
        trace.push(bundle.loss);

        let mut total = GradientBuffer::zeros(map.len());
        for (frame, adj) in framed.iter().zip(&bundle.adjoints) {
            let buf = render_gradients(
                map,
                &frame.pose,
                intrinsics,
                frame.exposure,
                &adj.d_color,
                &adj.d_depth,
                params,
            );
            // Densification statistic: per-view screen-space gradient norm.
            for (i, d2) in buf.d_mean2d.iter().enumerate() {
                if *d2 != Vector2::zeros() {
                    let stat = &mut map.stats_mut()[i];
                    stat.grad2d_accum += d2.norm();
                    stat.count += 1;
                }
            }
            total.add_assign(&buf);
        }
        let reg = scale_regularizer_gradient(map, config.lambda_reg);
        for (d, r) in total.d_log_scale.iter_mut().zip(&reg) {
            *d += r;
        }

        optimizer.apply(map, &total, config);
        for ((kf, exposure), grad) in exposures.iter_mut().zip(&bundle.d_exposure) {
            *exposure = optimizer.apply_exposure(*kf, *exposure, *grad, config);
        }

        *global_iteration += 1;
        if enable_densify && *global_iteration % densify.interval == 0 {
            let window: Vec<(KeyframeId, Pose)> =
                framed.iter().map(|f| (f.kf, f.pose)).collect();
            let visibility: Vec<BTreeSet<u64>> = bundle
                .renders
                .iter()
                .map(|r| r.visible_ids(map))
                .collect();
            let (a, r) = map.densify_and_prune(
                &window,
                &visibility,
                window_full,
                intrinsics,
                *global_iteration,
                densify,
                rng,
            );
            added_total += a;
            removed_total += r;
        }
    }

    OptimizeResult {
        loss_trace: trace,
        exposures,
        densify_added: added_total,
        densify_removed: removed_total,
    }
}

/// Final refinement: β iterations, one uniformly random keyframe each, same
/// loss, densification and pruning disabled.
#[allow(clippy::too_many_arguments)]
pub fn final_refine(
    map: &mut GaussianMap,
    frames: &[MapFrame],
    optimizer: &mut MapOptimizer,
    config: &MappingConfig,
    intrinsics: &Intrinsics,
    params: &RenderParams,
    beta: usize,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<(KeyframeId, (f64, f64))>) {
    let mut exposures: Vec<(KeyframeId, (f64, f64))> =
        frames.iter().map(|f| (f.kf, f.exposure)).collect();
    let mut trace = Vec::with_capacity(beta);
    for _ in 0..beta {
        let pick = rng.random_range(0..frames.len());
        let frame = MapFrame {
            exposure: exposures[pick].1,
            ..frames[pick].clone()
        };
        let bundle = compute_loss(map, std::slice::from_ref(&frame), config, intrinsics, params);
        trace.push(bundle.loss);
        let mut total = render_gradients(
            map,
            &frame.pose,
            intrinsics,
            frame.exposure,
            &bundle.adjoints[0].d_color,
            &bundle.adjoints[0].d_depth,
            params,
        );
        let reg = scale_regularizer_gradient(map, config.lambda_reg);
        for (d, r) in total.d_log_scale.iter_mut().zip(&reg) {
            *d += r;
        }
        optimizer.apply(map, &total, config);
        exposures[pick].1 = optimizer.apply_exposure(
            exposures[pick].0,
            exposures[pick].1,
            bundle.d_exposure[0],
            config,
        );
    }
    (trace, exposures)
}

#[cfg(test)]
mod tests;
