//! The 3D Gaussian scene: anchoring from proxy depth, densification and
//! pruning, and the closed-form deformation applied when a keyframe's pose or
//! proxy depth changes.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::grid::ColorImage;
use crate::proxy::ProxyDepth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("no valid depth pixels to anchor from")]
    EmptyDepth,
}

/// Identifies a keyframe; equals its index in the tracker's keyframe list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyframeId(pub usize);

impl std::fmt::Display for KeyframeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "kf{}", self.0)
    }
}

/// One anisotropic 3D Gaussian primitive.
#[derive(Clone, Debug)]
pub struct Gaussian {
    pub id: u64,
    /// World-frame mean, meters.
    pub mean: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Log of the per-axis scale, log-meters.
    pub log_scale: Vector3<f64>,
    /// Opacity through a sigmoid: `o = sigmoid(logit_opacity)`.
    pub logit_opacity: f64,
    /// RGB in [0, 1].
    pub color: Vector3<f64>,
    /// Keyframe whose pose/depth updates deform this Gaussian.
    pub anchor_kf: KeyframeId,
    /// Keyframe at whose mapping step the Gaussian was inserted.
    pub birth_kf: KeyframeId,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gaussian {
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    /// Σ = R S Sᵀ Rᵀ with S = diag(exp(log_scale)).
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s = self.scale();
        let rs = Matrix3::from_columns(&[
            r.column(0) * s[0],
            r.column(1) * s[1],
            r.column(2) * s[2],
        ]);
        rs * rs.transpose()
    }
}

/// Per-Gaussian accumulator of screen-space positional gradients, drives the
/// clone/split densification rule.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradStat {
    pub grad2d_accum: f64,
    pub count: u32,
}

/// A keyframe pose/proxy-depth update to apply to anchored Gaussians.
#[derive(Clone, Debug)]
pub struct KeyframeUpdate {
    pub kf: KeyframeId,
    pub old_pose: Pose,
    pub new_pose: Pose,
    pub old_proxy: ProxyDepth,
    pub new_proxy: ProxyDepth,
}

/// Densification / pruning knobs (3DGS-lineage defaults).
#[derive(Clone, Copy, Debug)]
pub struct DensifyConfig {
    /// Mapping-iteration interval at which pruning/densification runs.
    pub interval: u64,
    /// Gaussians below this opacity are removed globally.
    pub opacity_cutoff: f64,
    /// Projected 2D radius above this fraction of the image width is pruned.
    pub max_radius_frac: f64,
    /// Mean accumulated 2D positional gradient that triggers clone/split.
    pub grad_threshold: f64,
    /// Scale fraction of the scene extent separating clones from splits.
    pub percent_dense: f64,
    /// Newly inserted Gaussians must be seen by at least this many other
    /// window frames once the window is full.
    pub min_visibility: usize,
    /// How many trailing keyframes count as "newly inserted".
    pub recent_kf_span: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 150,
            opacity_cutoff: 0.7,
            max_radius_frac: 0.2,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            min_visibility: 3,
            recent_kf_span: 3,
        }
    }
}

/// Growable Gaussian set with a per-keyframe anchor index.
#[derive(Clone, Debug, Default)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    stats: Vec<GradStat>,
    anchor_index: BTreeMap<KeyframeId, Vec<u64>>,
    next_id: u64,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn stats_mut(&mut self) -> &mut [GradStat] {
        &mut self.stats
    }

    pub fn anchored_ids(&self, kf: KeyframeId) -> &[u64] {
        self.anchor_index.get(&kf).map_or(&[], Vec::as_slice)
    }

    pub fn anchored_keyframes(&self) -> impl Iterator<Item = KeyframeId> + '_ {
        self.anchor_index.keys().copied()
    }

    fn push(&mut self, mut g: Gaussian) -> u64 {
        g.id = self.next_id;
        self.next_id += 1;
        self.anchor_index.entry(g.anchor_kf).or_default().push(g.id);
        self.gaussians.push(g);
        self.stats.push(GradStat::default());
        self.gaussians.last().unwrap().id
    }

    /// Insert a fully specified Gaussian (id is reassigned). Mainly for
    /// synthetic scenes and tests.
    pub fn insert_raw(&mut self, g: Gaussian) -> u64 {
        self.push(g)
    }

    fn rebuild_anchor_index(&mut self) {
        self.anchor_index.clear();
        for g in &self.gaussians {
            self.anchor_index.entry(g.anchor_kf).or_default().push(g.id);
        }
    }

    fn remove_ids(&mut self, ids: &BTreeSet<u64>) -> usize {
        if ids.is_empty() {
            return 0;
        }
        let before = self.gaussians.len();
        let mut kept_stats = Vec::with_capacity(before);
        let mut kept = Vec::with_capacity(before);
        for (g, s) in self.gaussians.drain(..).zip(self.stats.drain(..)) {
            if !ids.contains(&g.id) {
                kept.push(g);
                kept_stats.push(s);
            }
        }
        self.gaussians = kept;
        self.stats = kept_stats;
        self.rebuild_anchor_index();
        before - self.gaussians.len()
    }

    /// Half-diagonal of the bounding box of all means; lower-bounded to keep
    /// learning-rate scaling sane on tiny maps.
    pub fn scene_extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 1.0;
        }
        let mut lo = self.gaussians[0].mean;
        let mut hi = lo;
        for g in &self.gaussians {
            lo = lo.inf(&g.mean);
            hi = hi.sup(&g.mean);
        }
        ((hi - lo).norm() * 0.5).max(1.0)
    }

    /// Anchor one Gaussian per retained grid sample of the proxy depth.
    ///
    /// Samples a regular grid with stride `⌊√θ⌋` in both axes, unprojects into
    /// the world, initializes rotation to identity, opacity to 0.5 and an
    /// isotropic scale from the nearest-neighbor distance within the new
    /// point cloud.
    pub fn anchor_gaussians(
        &mut self,
        kf: KeyframeId,
        pose: &Pose,
        intrinsics: &Intrinsics,
        image: &ColorImage,
        proxy: &ProxyDepth,
        downsample_factor: u32,
    ) -> Result<usize, MapError> {
        assert!(downsample_factor >= 1);
        let stride = ((downsample_factor as f64).sqrt().floor() as usize).max(1);
        let mut points = Vec::new();
        let mut colors = Vec::new();
        let mut y = 0;
        while y < proxy.depth.height() {
            let mut x = 0;
            while x < proxy.depth.width() {
                if let Some(d) = proxy.valid_depth(x, y) {
                    let cam = intrinsics
                        .unproject(x as f64, y as f64, d)
                        .expect("valid proxy depth is positive");
                    points.push(pose.transform_point(&cam));
                    colors.push(*image.get(x, y));
                }
                x += stride;
            }
            y += stride;
        }
        if points.is_empty() {
            return Err(MapError::EmptyDepth);
        }

        for (i, (&mean, &color)) in points.iter().zip(&colors).enumerate() {
            let mut nn = f64::INFINITY;
            for (j, other) in points.iter().enumerate() {
                if i != j {
                    nn = nn.min((mean - other).norm());
                }
            }
            let scale = nn.clamp(1e-4, 1.0);
            self.push(Gaussian {
                id: 0,
                mean,
                rotation: UnitQuaternion::identity(),
                log_scale: Vector3::repeat(scale.ln()),
                logit_opacity: logit(0.5),
                color,
                anchor_kf: kf,
                birth_kf: kf,
            });
        }
        Ok(points.len())
    }

    /// Opacity/extent pruning, clone/split densification and visibility
    /// pruning, gated to every `interval` mapping iterations.
    ///
    /// `window` lists the mapping window newest-last, `visibility` the
    /// per-window-frame visible Gaussian ids, and `window_full` enables the
    /// visibility rule. Returns `(added, removed)`.
    pub fn densify_and_prune(
        &mut self,
        window: &[(KeyframeId, Pose)],
        visibility: &[BTreeSet<u64>],
        window_full: bool,
        intrinsics: &Intrinsics,
        iteration: u64,
        config: &DensifyConfig,
        rng: &mut impl Rng,
    ) -> (usize, usize) {
        if iteration == 0 || iteration % config.interval != 0 {
            return (0, 0);
        }
        let mut remove: BTreeSet<u64> = BTreeSet::new();

        for g in &self.gaussians {
            if g.opacity() < config.opacity_cutoff {
                remove.insert(g.id);
            }
        }

        // Extent check in the newest window frame: 3σ of the projected
        // footprint against a fraction of the image width.
        if let Some((_, pose)) = window.last() {
            let cutoff = config.max_radius_frac * intrinsics.width as f64;
            let world_to_cam = pose.inverse();
            for g in &self.gaussians {
                let cam = world_to_cam.transform_point(&g.mean);
                if cam[2] <= 1e-2 {
                    continue;
                }
                let w = world_to_cam.rotation_matrix();
                let j = intrinsics.projection_jacobian(&cam);
                let cov2 = j * w * g.covariance() * w.transpose() * j.transpose();
                let eig_max = {
                    let tr = cov2[(0, 0)] + cov2[(1, 1)];
                    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
                    0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt()
                };
                if 3.0 * eig_max.max(0.0).sqrt() > cutoff {
                    remove.insert(g.id);
                }
            }
        }

        // Visibility rule: recently inserted Gaussians must be seen by enough
        // other window frames. The anchoring frame itself does not count.
        if window_full && !window.is_empty() {
            let newest = window.last().unwrap().0;
            let recent_floor = newest.0.saturating_sub(config.recent_kf_span.saturating_sub(1));
            for g in &self.gaussians {
                if g.birth_kf.0 < recent_floor {
                    continue;
                }
                let seen_by_others = window
                    .iter()
                    .zip(visibility)
                    .filter(|((kf, _), vis)| *kf != g.birth_kf && vis.contains(&g.id))
                    .count();
                if seen_by_others < config.min_visibility {
                    remove.insert(g.id);
                }
            }
        }

        // Clone/split on accumulated screen-space positional gradients.
        let extent = self.scene_extent();
        let dense_cutoff = config.percent_dense * extent;
        let mut clones = Vec::new();
        let mut splits = Vec::new();
        let newest = window.last().map(|(kf, _)| *kf);
        for (g, stat) in self.gaussians.iter().zip(&self.stats) {
            if remove.contains(&g.id) || stat.count == 0 {
                continue;
            }
            if stat.grad2d_accum / stat.count as f64 <= config.grad_threshold {
                continue;
            }
            if g.scale().max() <= dense_cutoff {
                clones.push(g.clone());
            } else {
                splits.push(g.clone());
                remove.insert(g.id);
            }
        }

        let mut added = 0;
        for mut g in clones {
            if let Some(kf) = newest {
                g.birth_kf = kf;
            }
            self.push(g);
            added += 1;
        }
        for g in splits {
            // Two children sampled from the parent, scales shrunk by 1.6.
            let r = g.rotation.to_rotation_matrix().into_inner();
            let s = g.scale();
            for _ in 0..2 {
                let local = Vector3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                );
                let offset = r * Vector3::new(local[0] * s[0], local[1] * s[1], local[2] * s[2]);
                let mut child = g.clone();
                child.mean += offset;
                child.log_scale = g.log_scale.map(|l| l - 1.6f64.ln());
                if let Some(kf) = newest {
                    child.birth_kf = kf;
                }
                self.push(child);
                added += 1;
            }
        }

        let removed = self.remove_ids(&remove);
        for stat in &mut self.stats {
            *stat = GradStat::default();
        }
        (added, removed)
    }

    /// Apply keyframe pose/depth updates to anchored Gaussians.
    ///
    /// A Gaussian whose old-pose projection lands on valid depth in both the
    /// old and new proxy map is shifted along its viewing ray by the depth
    /// change; otherwise only the rigid part is applied. Returns the number
    /// of deformed Gaussians.
    pub fn deform(&mut self, updates: &[KeyframeUpdate], intrinsics: &Intrinsics) -> usize {
        let mut seen = BTreeSet::new();
        for u in updates {
            assert!(seen.insert(u.kf), "duplicate keyframe update {}", u.kf);
        }
        let mut count = 0;
        for update in updates {
            let ids: BTreeSet<u64> = self.anchored_ids(update.kf).iter().copied().collect();
            if ids.is_empty() {
                continue;
            }
            let old_inv = update.old_pose.inverse();
            let delta_rot = update.new_pose.rotation * old_inv.rotation;
            for g in &mut self.gaussians {
                if !ids.contains(&g.id) {
                    continue;
                }
                let cam = old_inv.transform_point(&g.mean);
                let mut factor = None;
                if cam[2] > 1e-8 {
                    if let Ok((u, v, z)) = intrinsics.project(&cam) {
                        if intrinsics.in_bounds(u, v) {
                            let (px, py) = (u.round() as usize, v.round() as usize);
                            if let (Some(d_old), Some(d_new)) = (
                                update.old_proxy.valid_depth(px, py),
                                update.new_proxy.valid_depth(px, py),
                            ) {
                                let f = 1.0 + (d_new - d_old) / z;
                                // A non-positive factor would flip the
                                // Gaussian through the camera; fall back to
                                // the rigid part.
                                if f > 0.0 {
                                    factor = Some(f);
                                }
                            }
                        }
                    }
                }
                let f = factor.unwrap_or(1.0);
                g.mean = update.new_pose.transform_point(&(cam * f));
                g.rotation = delta_rot * g.rotation;
                if f != 1.0 {
                    g.log_scale += Vector3::repeat(f.ln());
                }
                count += 1;
            }
        }
        count
    }
}
