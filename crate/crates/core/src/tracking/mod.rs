//! Factor-graph tracker: keyframes with dense disparity, flow edges, disparity
//! consistency classification, loop detection and scale normalization.
//!
//! The Gauss-Newton machinery for the joint pose/disparity objective and the
//! mono-regularized disparity refinement lives in [`ba`].

mod ba;

pub use ba::{dba_step, dspo_step, BaContext, BaReport};

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::gaussians::KeyframeId;
use crate::geometry::{Intrinsics, Pose};
use crate::grid::{ColorImage, DepthMap, Grid, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TrackError {
    /// Reduced pose system rank-deficient beyond the gauge freedoms.
    #[error("singular reduced system (degenerate graph)")]
    SingularSystem,
    /// Scale/shift regressor constant or too few samples.
    #[error("degenerate scale/shift fit")]
    DegenerateFit,
}

/// A tracked keyframe: optimization state plus cached observations.
#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: KeyframeId,
    /// Index of the source frame in the input stream.
    pub frame_index: usize,
    /// Camera-to-world pose ω.
    pub pose: Pose,
    /// Per-pixel disparity (inverse depth, 1/m); non-positive marks invalid.
    pub disparity: DepthMap,
    /// Relative monocular depth (unitless until scale/shift applied).
    pub mono_depth: DepthMap,
    /// Disparity-space affine fit of the mono depth: `d ≈ θ·(1/D_mono) + γ`.
    pub scale: f64,
    pub shift: f64,
    pub image: ColorImage,
    /// Two-view consistency count per pixel.
    pub consistency: Grid<u32>,
    /// Pixels whose disparity passed the consistency threshold.
    pub low_error: Grid<bool>,
    /// Photometric exposure compensation (a, b).
    pub exposure: (f64, f64),
}

impl Keyframe {
    pub fn new(
        id: KeyframeId,
        frame_index: usize,
        pose: Pose,
        disparity: DepthMap,
        mono_depth: DepthMap,
        image: ColorImage,
    ) -> Self {
        let (w, h) = (disparity.width(), disparity.height());
        Self {
            id,
            frame_index,
            pose,
            disparity,
            mono_depth,
            scale: 1.0,
            shift: 0.0,
            image,
            consistency: Grid::filled(w, h, 0),
            low_error: Grid::filled(w, h, false),
            exposure: (1.0, 0.0),
        }
    }

    /// Multi-view depth `D̃ = 1/d` where the disparity is valid.
    pub fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.disparity.get(x, y);
        (d > 0.0).then(|| 1.0 / d)
    }

    pub fn mean_depth(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &d in self.disparity.as_slice() {
            if d > 0.0 {
                sum += 1.0 / d;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
    Global,
}

/// Directed flow observation: pixels of `from` land at `target` in `to`.
#[derive(Clone, Debug)]
pub struct FlowEdge {
    pub from: KeyframeId,
    pub to: KeyframeId,
    /// Predicted absolute pixel coordinates in the target frame.
    pub target: VectorField,
    /// Per-pixel, per-coordinate confidence (diagonal weighting).
    pub weight: VectorField,
    pub kind: EdgeKind,
}

impl FlowEdge {
    pub fn key(&self) -> (KeyframeId, KeyframeId, EdgeKind) {
        (self.from, self.to, self.kind)
    }
}

/// Keyframes plus flow edges, with the damping state of the two optimizers.
#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    pub keyframes: Vec<Keyframe>,
    pub edges: Vec<FlowEdge>,
    pub lm_dba: f64,
    pub lm_dspo: f64,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self {
            keyframes: Vec::new(),
            edges: Vec::new(),
            lm_dba: 1e-4,
            lm_dspo: 1e-4,
        }
    }

    pub fn add_keyframe(&mut self, kf: Keyframe) -> KeyframeId {
        debug_assert_eq!(kf.id.0, self.keyframes.len());
        let id = kf.id;
        self.keyframes.push(kf);
        id
    }

    /// Adds an edge unless an identical `(from, to, kind)` edge exists.
    pub fn add_edge(&mut self, edge: FlowEdge) -> bool {
        assert!(edge.from.0 < self.keyframes.len() && edge.to.0 < self.keyframes.len());
        assert_ne!(edge.from, edge.to);
        if self.edges.iter().any(|e| e.key() == edge.key()) {
            return false;
        }
        self.edges.push(edge);
        true
    }

    pub fn keyframe(&self, id: KeyframeId) -> &Keyframe {
        &self.keyframes[id.0]
    }

    pub fn keyframe_mut(&mut self, id: KeyframeId) -> &mut Keyframe {
        &mut self.keyframes[id.0]
    }
}

/// Keyframe admission: true when the mean flow magnitude strictly exceeds τ.
pub fn keyframe_gate(mean_flow: f64, tau: f64) -> bool {
    mean_flow > tau
}

/// Per-pixel two-view consistency counts and the low-error mask.
///
/// Each valid pixel of frame `i` is warped into every other keyframe; the
/// other frame's depth at the nearest landing pixel is back-projected and the
/// two world points compared against `η · mean(D̃_i)`.
pub fn classify_disparities(
    keyframes: &[Keyframe],
    frame: usize,
    intrinsics: &Intrinsics,
    eta: f64,
    threshold: u32,
) -> (Grid<u32>, Grid<bool>) {
    let kf = &keyframes[frame];
    let (w, h) = (kf.disparity.width(), kf.disparity.height());
    let mut counts = Grid::filled(w, h, 0u32);
    let Some(mean_depth) = kf.mean_depth() else {
        return (counts.clone(), Grid::filled(w, h, false));
    };
    let dist_cutoff = eta * mean_depth;

    let others: Vec<&Keyframe> = keyframes
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != frame)
        .map(|(_, kf)| kf)
        .collect();
    let world_to_cam: Vec<Pose> = others.iter().map(|o| o.pose.inverse()).collect();

    for y in 0..h {
        for x in 0..w {
            let Some(depth) = kf.depth_at(x, y) else {
                continue;
            };
            let cam = intrinsics
                .unproject(x as f64, y as f64, depth)
                .expect("positive depth");
            let p_i = kf.pose.transform_point(&cam);
            let mut n = 0u32;
            for (other, w2c) in others.iter().zip(&world_to_cam) {
                let cam_k = w2c.transform_point(&p_i);
                let Ok((u, v, _)) = intrinsics.project(&cam_k) else {
                    continue;
                };
                if !intrinsics.in_bounds(u, v) {
                    continue;
                }
                let (px, py) = (u.round() as usize, v.round() as usize);
                let Some(depth_k) = other.depth_at(px, py) else {
                    continue;
                };
                let cam_pt = intrinsics
                    .unproject(px as f64, py as f64, depth_k)
                    .expect("positive depth");
                let p_k = other.pose.transform_point(&cam_pt);
                if (p_i - p_k).norm() < dist_cutoff {
                    n += 1;
                }
            }
            *counts.get_mut(x, y) = n;
        }
    }
    let mask = Grid::from_fn(w, h, |x, y| *counts.get(x, y) >= threshold);
    (counts, mask)
}

/// Loop candidates: for every active keyframe against every earlier keyframe,
/// a unidirectional edge qualifies when the mean flow stays below `τ_loop`
/// and the frame gap exceeds `τ_t`. Returns `(from, to)` keyframe id pairs.
pub fn detect_loops(
    graph: &FactorGraph,
    active: &BTreeSet<usize>,
    mean_flow: impl Fn(usize, usize) -> f64,
    tau_loop: f64,
    tau_t: usize,
) -> Vec<(KeyframeId, KeyframeId)> {
    let mut pairs = Vec::new();
    for &i in active {
        let fi = graph.keyframes[i].frame_index;
        for (j, kf_j) in graph.keyframes.iter().enumerate() {
            if active.contains(&j) {
                continue;
            }
            let gap = fi.abs_diff(kf_j.frame_index);
            if gap <= tau_t {
                continue;
            }
            if mean_flow(fi, kf_j.frame_index) >= tau_loop {
                continue;
            }
            let key = (KeyframeId(i), KeyframeId(j), EdgeKind::Loop);
            if graph.edges.iter().any(|e| e.key() == key) {
                continue;
            }
            pairs.push((KeyframeId(i), KeyframeId(j)));
        }
    }
    pairs
}

/// Normalize the disparity/translation scale gauge: divides all disparities
/// by the global mean d̄ and multiplies all translations by d̄. The
/// disparity-space scale/shift fits are rescaled alongside. Returns d̄.
pub fn normalize_scale(keyframes: &mut [Keyframe]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for kf in keyframes.iter() {
        for &d in kf.disparity.as_slice() {
            if d > 0.0 {
                sum += d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return 1.0;
    }
    let mean = sum / n as f64;
    for kf in keyframes.iter_mut() {
        for d in kf.disparity.as_mut_slice() {
            if *d > 0.0 {
                *d /= mean;
            }
        }
        kf.pose.translation *= mean;
        kf.scale /= mean;
        kf.shift /= mean;
    }
    mean
}

/// Closed-form least squares of `y ≈ θ·x + γ`.
pub fn fit_affine(
    xs: impl IntoIterator<Item = f64>,
    ys: impl IntoIterator<Item = f64>,
) -> Result<(f64, f64), TrackError> {
    let mut n = 0usize;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in xs.into_iter().zip(ys) {
        n += 1;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    if n < 2 {
        return Err(TrackError::DegenerateFit);
    }
    let nf = n as f64;
    let var_x = sxx / nf - (sx / nf) * (sx / nf);
    if var_x <= 1e-12 * (sxx / nf).max(1e-30) {
        return Err(TrackError::DegenerateFit);
    }
    let theta = (sxy / nf - sx * sy / (nf * nf)) / var_x;
    let gamma = (sy - theta * sx) / nf;
    Ok((theta, gamma))
}

/// Disparity-space scale/shift initialization over the low-error pixels:
/// regress `d^l` on `1/D_mono`.
pub fn fit_scale_shift(kf: &Keyframe) -> Result<(f64, f64), TrackError> {
    let samples: Vec<(f64, f64)> = kf
        .disparity
        .pixels()
        .filter(|(x, y, d)| **d > 0.0 && *kf.low_error.get(*x, *y) && *kf.mono_depth.get(*x, *y) > 0.0)
        .map(|(x, y, &d)| (1.0 / kf.mono_depth.get(x, y), d))
        .collect();
    fit_affine(samples.iter().map(|s| s.0), samples.iter().map(|s| s.1))
}

/// Weighted squared reprojection residual of the flow objective over the
/// given edges. Shared by the solver's step control and the gauge tests.
pub fn reprojection_cost(
    keyframes: &[Keyframe],
    edges: &[FlowEdge],
    intrinsics: &Intrinsics,
) -> f64 {
    let mut cost = 0.0;
    for edge in edges {
        let kf_i = &keyframes[edge.from.0];
        let kf_j = &keyframes[edge.to.0];
        let rel = kf_j.pose.inverse().compose(&kf_i.pose);
        for (x, y, &d) in kf_i.disparity.pixels() {
            if d <= 0.0 {
                continue;
            }
            let wgt = *edge.weight.get(x, y);
            if wgt[0] == 0.0 && wgt[1] == 0.0 {
                continue;
            }
            let cam_i = intrinsics.ray(x as f64, y as f64) / d;
            let cam_j = rel.transform_point(&cam_i);
            let (proj, _) = ba::clamped_projection(intrinsics, &cam_j);
            let r = edge.target.get(x, y) - proj;
            cost += wgt[0] * r[0] * r[0] + wgt[1] * r[1] * r[1];
        }
    }
    cost
}

/// World point of pixel `(x, y)` in keyframe `kf` through its disparity.
pub fn backproject_pixel(
    kf: &Keyframe,
    x: usize,
    y: usize,
    intrinsics: &Intrinsics,
) -> Option<Vector3<f64>> {
    let depth = kf.depth_at(x, y)?;
    let cam = intrinsics.unproject(x as f64, y as f64, depth).ok()?;
    Some(kf.pose.transform_point(&cam))
}
