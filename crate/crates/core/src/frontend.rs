//! Frame source abstraction: what the tracker consumes per frame.
//!
//! The synthetic world and the disk dataset reader both implement
//! [`FrameSource`]; the pipeline never knows which one it is driving.

use crate::geometry::{Intrinsics, Pose};
use crate::grid::{ColorImage, DepthMap, VectorField};

/// Dense flow observation between two frames: per-pixel predicted target
/// coordinates and per-coordinate confidence. Occluded or out-of-frustum
/// pixels carry zero confidence.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub target: VectorField,
    pub confidence: VectorField,
}

/// Per-frame observation: image plus relative monocular depth.
#[derive(Clone, Debug)]
pub struct FrameData {
    pub image: ColorImage,
    pub mono_depth: DepthMap,
}

pub trait FrameSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn intrinsics(&self) -> Intrinsics;

    fn frame(&self, index: usize) -> FrameData;

    /// Predicted dense correspondences from `from` to `to`.
    fn flow(&self, from: usize, to: usize) -> FlowField;

    /// Mean flow displacement magnitude between two frames, over pixels with
    /// positive confidence. The default subsamples with stride 4.
    fn mean_flow(&self, from: usize, to: usize) -> f64 {
        let field = self.flow(from, to);
        let (w, h) = (field.target.width(), field.target.height());
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut y = 0;
        while y < h {
            let mut x = 0;
            while x < w {
                let conf = field.confidence.get(x, y);
                if conf[0] > 0.0 || conf[1] > 0.0 {
                    let t = field.target.get(x, y);
                    let dx = t[0] - x as f64;
                    let dy = t[1] - y as f64;
                    sum += (dx * dx + dy * dy).sqrt();
                    n += 1;
                }
                x += 4;
            }
            y += 4;
        }
        if n == 0 {
            // No covisibility: treat as unbounded flow so gating never fires.
            f64::INFINITY
        } else {
            sum / n as f64
        }
    }

    /// Ground-truth pose, when the source has one (synthetic worlds, datasets
    /// with a trajectory file).
    fn gt_pose(&self, index: usize) -> Option<Pose>;

    /// Ground-truth depth for evaluation, when available.
    fn gt_depth(&self, index: usize) -> Option<DepthMap>;
}
