//! Trajectory and image metrics: Sim3 alignment, ATE RMSE, PSNR, SSIM and
//! depth L1.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::grid::{ColorImage, DepthMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("need at least 3 non-collinear correspondences")]
    DegenerateGeometry,
    #[error("trajectories share no frame ids")]
    EmptyOverlap,
    #[error("image dimensions do not match")]
    DimensionMismatch,
}

/// Estimated or ground-truth trajectory: strictly increasing frame ids.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    entries: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: usize, pose: Pose) {
        if let Some((last, _)) = self.entries.last() {
            assert!(frame > *last, "frame ids must strictly increase");
        }
        self.entries.push((frame, pose));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, Pose)] {
        &self.entries
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|(_, p)| p.translation).collect()
    }
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Closed-form least-squares similarity aligning `source` onto `target`
/// (Umeyama). Requires ≥ 3 non-collinear points.
pub fn align_sim3(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Sim3, EvalError> {
    if source.len() < 3 || source.len() != target.len() {
        return Err(EvalError::DegenerateGeometry);
    }
    let n = source.len() as f64;
    let mu_s: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / n;
    let mu_t: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::<f64>::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-18 {
        return Err(EvalError::DegenerateGeometry);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(EvalError::DegenerateGeometry)?;
    let v_t = svd.v_t.ok_or(EvalError::DegenerateGeometry)?;
    // Collinear points leave the similarity underdetermined.
    let nonzero = svd.singular_values.iter().filter(|s| **s > 1e-12).count();
    if nonzero < 2 {
        return Err(EvalError::DegenerateGeometry);
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * v_t;
    let scale = (svd.singular_values[0] * d[(0, 0)]
        + svd.singular_values[1] * d[(1, 1)]
        + svd.singular_values[2] * d[(2, 2)])
        / var_s;
    let rotation = UnitQuaternion::from_matrix(&rot);
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    None,
    Sim3,
}

/// RMSE of translational residuals between matched frames, in centimeters,
/// after optional Sim3 alignment of the estimate onto the ground truth.
pub fn ate_rmse(estimate: &Trajectory, gt: &Trajectory, align: Alignment) -> Result<f64, EvalError> {
    let mut pairs: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::new();
    let mut gt_iter = gt.entries().iter().peekable();
    for (frame, pose) in estimate.entries() {
        while let Some((gf, _)) = gt_iter.peek() {
            if gf < frame {
                gt_iter.next();
            } else {
                break;
            }
        }
        if let Some((gf, gp)) = gt_iter.peek() {
            if gf == frame {
                pairs.push((pose.translation, gp.translation));
            }
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    let transform = match align {
        Alignment::None => Sim3::identity(),
        Alignment::Sim3 => {
            let src: Vec<_> = pairs.iter().map(|(e, _)| *e).collect();
            let dst: Vec<_> = pairs.iter().map(|(_, g)| *g).collect();
            align_sim3(&src, &dst)?
        }
    };
    let mse: f64 = pairs
        .iter()
        .map(|(e, g)| (transform.apply(e) - g).norm_squared())
        .sum::<f64>()
        / pairs.len() as f64;
    Ok(mse.sqrt() * 100.0)
}

#[derive(Clone, Copy, Debug)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Mean absolute depth error in centimeters over pixels valid in both
    /// maps; `None` when no pixel qualifies.
    pub depth_l1_cm: Option<f64>,
}

/// PSNR for [0,1] images, capped at 100 dB for vanishing MSE.
pub fn psnr(rendered: &ColorImage, reference: &ColorImage) -> Result<f64, EvalError> {
    if !rendered.same_size(reference) {
        return Err(EvalError::DimensionMismatch);
    }
    let mut mse = 0.0;
    for (a, b) in rendered.as_slice().iter().zip(reference.as_slice()) {
        let d = a - b;
        mse += d.norm_squared();
    }
    mse /= (rendered.len() * 3) as f64;
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// SSIM with an 11x11 Gaussian window (σ = 1.5), C1 = 0.01², C2 = 0.03²,
/// averaged over the three channels and over every pixel whose window fits.
pub fn ssim(rendered: &ColorImage, reference: &ColorImage) -> Result<f64, EvalError> {
    if !rendered.same_size(reference) {
        return Err(EvalError::DimensionMismatch);
    }
    const RADIUS: usize = 5;
    let (w, h) = (rendered.width(), rendered.height());
    if w < 2 * RADIUS + 1 || h < 2 * RADIUS + 1 {
        return Err(EvalError::DimensionMismatch);
    }
    let kernel = gaussian_kernel_11();
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;

    let mut total = 0.0;
    let mut count = 0usize;
    for cy in RADIUS..h - RADIUS {
        for cx in RADIUS..w - RADIUS {
            for ch in 0..3 {
                let (mut mu_x, mut mu_y) = (0.0, 0.0);
                let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = kernel[dy] * kernel[dx];
                        let px = rendered.get(cx + dx - RADIUS, cy + dy - RADIUS)[ch];
                        let py = reference.get(cx + dx - RADIUS, cy + dy - RADIUS)[ch];
                        mu_x += wgt * px;
                        mu_y += wgt * py;
                        xx += wgt * px * px;
                        yy += wgt * py * py;
                        xy += wgt * px * py;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                    / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel_11() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean |rendered − reference| in cm over pixels where both depths are valid
/// (positive reference, `valid` mask true on the rendered side).
pub fn depth_l1_cm(
    rendered: &DepthMap,
    rendered_valid: impl Fn(usize, usize) -> bool,
    reference: &DepthMap,
) -> Result<Option<f64>, EvalError> {
    if !rendered.same_size(reference) {
        return Err(EvalError::DimensionMismatch);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y, &d) in rendered.pixels() {
        let r = *reference.get(x, y);
        if r > 0.0 && rendered_valid(x, y) {
            sum += (d - r).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64 * 100.0))
}

/// Bundled image metrics per the evaluation protocol.
pub fn image_metrics(
    rendered: &ColorImage,
    reference: &ColorImage,
    rendered_depth: &DepthMap,
    rendered_alpha: &DepthMap,
    reference_depth: &DepthMap,
) -> Result<ImageMetrics, EvalError> {
    Ok(ImageMetrics {
        psnr_db: psnr(rendered, reference)?,
        ssim: ssim(rendered, reference)?,
        depth_l1_cm: depth_l1_cm(
            rendered_depth,
            |x, y| *rendered_alpha.get(x, y) >= 0.5,
            reference_depth,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn toy_trajectory(offsets: &[(f64, f64, f64)]) -> Trajectory {
        let mut t = Trajectory::new();
        for (i, (x, y, z)) in offsets.iter().enumerate() {
            t.push(
                i,
                Pose::new(UnitQuaternion::identity(), Vector3::new(*x, *y, *z)),
            );
        }
        t
    }

    fn random_points(rng: &mut StdRng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn sim3_identity_for_equal_trajectories() {
        let mut rng = StdRng::seed_from_u64(1);
        let pts = random_points(&mut rng, 10);
        let t = align_sim3(&pts, &pts).unwrap();
        assert_relative_eq!(t.scale, 1.0, epsilon = 1e-12);
        assert!(t.rotation.angle() < 1e-9);
        assert!(t.translation.norm() < 1e-9);
    }

    #[test]
    fn sim3_recovers_pure_scale() {
        let mut rng = StdRng::seed_from_u64(2);
        let pts = random_points(&mut rng, 10);
        let doubled: Vec<_> = pts.iter().map(|p| p * 2.0).collect();
        let t = align_sim3(&doubled, &pts).unwrap();
        assert_relative_eq!(t.scale, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn sim3_recovers_random_similarity_and_matches_bruteforce() {
        let mut rng = StdRng::seed_from_u64(3);
        let pts = random_points(&mut rng, 10);
        let true_t = Sim3 {
            scale: 1.7,
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.5, 0.8)),
            translation: Vector3::new(0.4, -1.2, 2.0),
        };
        let moved: Vec<_> = pts.iter().map(|p| true_t.apply(p)).collect();
        let est = align_sim3(&pts, &moved).unwrap();
        assert_relative_eq!(est.scale, true_t.scale, epsilon = 1e-9);
        assert!((est.rotation.inverse() * true_t.rotation).angle() < 1e-9);
        assert_relative_eq!(est.translation, true_t.translation, epsilon = 1e-9);
        // Residual is no worse than a random-search oracle around the truth.
        let resid = |s: f64, rot: &UnitQuaternion<f64>, tr: &Vector3<f64>| -> f64 {
            pts.iter()
                .zip(&moved)
                .map(|(p, m)| (s * (rot * p) + tr - m).norm_squared())
                .sum()
        };
        let est_resid = resid(est.scale, &est.rotation, &est.translation);
        let mut best = f64::INFINITY;
        for _ in 0..200 {
            let s = true_t.scale * rng.random_range(0.98..1.02);
            let rot = UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            )) * true_t.rotation;
            let tr = true_t.translation
                + Vector3::new(
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                );
            best = best.min(resid(s, &rot, &tr));
        }
        assert!(est_resid <= best + 1e-12);
    }

    #[test]
    fn sim3_degenerate_collinear() {
        let pts: Vec<_> = (0..5)
            .map(|i| Vector3::new(i as f64, 0.0, 0.0))
            .collect();
        assert_eq!(
            align_sim3(&pts, &pts).unwrap_err(),
            EvalError::DegenerateGeometry
        );
    }

    #[test]
    fn ate_identical_is_zero() {
        let t = toy_trajectory(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 1.0, 0.0)]);
        assert_relative_eq!(ate_rmse(&t, &t, Alignment::None).unwrap(), 0.0);
    }

    #[test]
    fn ate_constant_offset_no_alignment() {
        let gt = toy_trajectory(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)]);
        let est = toy_trajectory(&[(0.01, 0.0, 0.0), (1.01, 0.0, 0.0)]);
        assert_relative_eq!(
            ate_rmse(&est, &gt, Alignment::None).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ate_two_pose_hand_value() {
        // Residuals 1 cm and 3 cm → RMSE = sqrt((1+9)/2) = sqrt(5) cm.
        let gt = toy_trajectory(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)]);
        let est = toy_trajectory(&[(0.01, 0.0, 0.0), (1.0, 0.03, 0.0)]);
        assert_relative_eq!(
            ate_rmse(&est, &gt, Alignment::None).unwrap(),
            5.0f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ate_alignment_invariant_to_sim3_of_estimate() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut gt = Trajectory::new();
        for i in 0..12 {
            gt.push(
                i,
                Pose::new(
                    UnitQuaternion::identity(),
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                ),
            );
        }
        // Estimate = noisy ground truth.
        let mut est = Trajectory::new();
        for (f, p) in gt.entries() {
            let mut t = p.translation;
            t += Vector3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            );
            est.push(*f, Pose::new(p.rotation, t));
        }
        let base = ate_rmse(&est, &gt, Alignment::Sim3).unwrap();
        let warp = Sim3 {
            scale: 2.3,
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(0.5, 0.2, -0.7)),
            translation: Vector3::new(5.0, -2.0, 1.0),
        };
        let mut est2 = Trajectory::new();
        for (f, p) in est.entries() {
            est2.push(*f, Pose::new(p.rotation, warp.apply(&p.translation)));
        }
        let warped = ate_rmse(&est2, &gt, Alignment::Sim3).unwrap();
        assert_relative_eq!(base, warped, epsilon = 1e-9);
    }

    #[test]
    fn ate_empty_overlap_errors() {
        let mut a = Trajectory::new();
        a.push(0, Pose::identity());
        let mut b = Trajectory::new();
        b.push(5, Pose::identity());
        assert_eq!(
            ate_rmse(&a, &b, Alignment::None).unwrap_err(),
            EvalError::EmptyOverlap
        );
    }

    #[test]
    fn psnr_examples() {
        let a: ColorImage = Grid::filled(16, 16, Vector3::repeat(0.5));
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b: ColorImage = Grid::filled(16, 16, Vector3::repeat(0.6));
        // Uniform 0.1 difference → MSE = 0.01 → 20 dB.
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let mut rng = StdRng::seed_from_u64(9);
        let base: ColorImage = Grid::from_fn(24, 24, |_, _| {
            Vector3::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
            )
        });
        let mut last = f64::INFINITY;
        for level in 1..=5 {
            let amp = level as f64 * 0.02;
            let mut rng2 = StdRng::seed_from_u64(10);
            let noisy = base.map(|c| {
                c.map(|v| (v + rng2.random_range(-amp..amp)).clamp(0.0, 1.0))
            });
            let p = psnr(&noisy, &base).unwrap();
            assert!(p < last, "psnr must strictly decrease with noise");
            last = p;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a: ColorImage = Grid::from_fn(16, 16, |x, y| {
            Vector3::repeat(((x + y) % 2) as f64 * 0.8 + 0.1)
        });
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        // Checkerboard vs inverted checkerboard, verified against a direct
        // per-window evaluation written out longhand.
        let a: ColorImage = Grid::from_fn(16, 16, |x, y| {
            Vector3::repeat(((x + y) % 2) as f64 * 0.8 + 0.1)
        });
        let b: ColorImage = a.map(|c| Vector3::repeat(1.0 - c[0]));
        let got = ssim(&a, &b).unwrap();

        let sigma = 1.5f64;
        let mut kernel = [0.0f64; 11];
        let mut sum = 0.0;
        for (i, v) in kernel.iter_mut().enumerate() {
            let x = i as f64 - 5.0;
            *v = (-x * x / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
        for v in &mut kernel {
            *v /= sum;
        }
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        let mut count = 0;
        for cy in 5..11 {
            for cx in 5..11 {
                for ch in 0..3 {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut sxx = 0.0;
                    let mut syy = 0.0;
                    let mut sxy = 0.0;
                    for dy in 0..11usize {
                        for dx in 0..11usize {
                            let w = kernel[dy] * kernel[dx];
                            let pa = a.get(cx + dx - 5, cy + dy - 5)[ch];
                            let pb = b.get(cx + dx - 5, cy + dy - 5)[ch];
                            mx += w * pa;
                            my += w * pb;
                            sxx += w * pa * pa;
                            syy += w * pb * pb;
                            sxy += w * pa * pb;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cxy = sxy - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        let oracle = total / count as f64;
        assert_relative_eq!(got, oracle, epsilon = 1e-6);
    }

    #[test]
    fn depth_l1_masks_and_units() {
        let rendered: DepthMap = Grid::filled(8, 8, 2.05);
        let reference: DepthMap = Grid::from_fn(8, 8, |x, _| if x < 4 { 2.0 } else { 0.0 });
        let l1 = depth_l1_cm(&rendered, |_, _| true, &reference)
            .unwrap()
            .unwrap();
        assert_relative_eq!(l1, 5.0, epsilon = 1e-9);
        let none = depth_l1_cm(&rendered, |_, _| false, &reference).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn dimension_mismatch_detected() {
        let a: ColorImage = Grid::filled(8, 8, Vector3::zeros());
        let b: ColorImage = Grid::filled(9, 8, Vector3::zeros());
        assert_eq!(psnr(&a, &b).unwrap_err(), EvalError::DimensionMismatch);
    }
}
