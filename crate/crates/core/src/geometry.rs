//! Rigid-body transforms, pinhole camera model and pixel/ray algebra.
//!
//! Poses are camera-to-world: `pose * x_cam = x_world`. Updates go through a
//! left-multiplicative se(3) retraction, tangents are ordered (rotation,
//! translation).

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    /// Point at or behind the camera plane; the caller must cull.
    #[error("non-positive depth in projection")]
    NonPositiveDepth,
}

/// Rigid transform stored as unit quaternion + translation (camera-to-world).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_parts(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_scaled_axis(axis_angle),
            translation,
        }
    }

    /// `self ∘ other`, applying `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates (equals the translation for
    /// camera-to-world poses).
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Left-multiplicative retraction: `exp(delta) ∘ self`.
    pub fn retract(&self, delta: &Tangent) -> Pose {
        delta.exp().compose(self)
    }

    /// Inverse of [`Pose::retract`] at the identity tangent: `log(self ∘ base⁻¹)`.
    pub fn local_coordinates(&self, base: &Pose) -> Tangent {
        self.compose(&base.inverse()).log()
    }

    /// se(3) logarithm; rotation angle must be below π.
    pub fn log(&self) -> Tangent {
        let omega = self.rotation.scaled_axis();
        let v_inv = se3_left_jacobian_inv(&omega);
        Tangent {
            rotation: omega,
            translation: v_inv * self.translation,
        }
    }

    /// Largest absolute entry of the 3x4 matrix difference, used by tests and
    /// convergence checks.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let ra = self.rotation_matrix();
        let rb = other.rotation_matrix();
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((ra[(i, j)] - rb[(i, j)]).abs());
            }
            m = m.max((self.translation[i] - other.translation[i]).abs());
        }
        m
    }
}

/// se(3) increment: 3 rotational then 3 translational components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tangent {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Tangent {
    pub fn zero() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        )
    }

    pub fn norm(&self) -> f64 {
        (self.rotation.norm_squared() + self.translation.norm_squared()).sqrt()
    }

    /// se(3) exponential with the closed-form left Jacobian.
    pub fn exp(&self) -> Pose {
        let rotation = UnitQuaternion::from_scaled_axis(self.rotation);
        let v = se3_left_jacobian(&self.rotation);
        Pose {
            rotation,
            translation: v * self.translation,
        }
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

fn se3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let hat = skew(omega);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor series of (1-cos)/θ² and (θ-sin)/θ³.
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + hat * a + hat * hat * b
}

fn se3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let hat = skew(omega);
    let b = if theta2 < 1e-12 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - hat * 0.5 + hat * hat * b
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0);
        assert!(cx >= 0.0 && cx < width as f64);
        assert!(cy >= 0.0 && cy < height as f64);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Project a camera-frame point; returns `(u, v, z)`.
    pub fn project(&self, x_cam: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
        let z = x_cam[2];
        if z <= 1e-8 {
            return Err(GeometryError::NonPositiveDepth);
        }
        Ok((
            self.fx * x_cam[0] / z + self.cx,
            self.fy * x_cam[1] / z + self.cy,
            z,
        ))
    }

    /// Back-project pixel `(u, v)` at `depth` into the camera frame.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::NonPositiveDepth);
        }
        Ok(Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Unit-depth ray through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Whether float pixel coordinates land inside the pixel-center bounds,
    /// with one-ulp slack so exact border projections stay inside.
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= -1e-9
            && v >= -1e-9
            && u <= (self.width - 1) as f64 + 1e-9
            && v <= (self.height - 1) as f64 + 1e-9
    }

    /// 2x3 Jacobian of the projection at a camera-frame point.
    pub fn projection_jacobian(&self, x_cam: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let (x, y, z) = (x_cam[0], x_cam[1], x_cam[2]);
        let iz = 1.0 / z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * y * iz2,
        )
    }
}

/// Pixel coordinates as a 2-vector, center convention.
pub fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64, y as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_pose(rng: &mut StdRng) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Pose::from_parts(axis, t)
    }

    #[test]
    fn transform_identity() {
        let p = Pose::identity();
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(p.transform_point(&x), x);
    }

    #[test]
    fn transform_quarter_turn_about_z() {
        let p = Pose::from_parts(
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Vector3::zeros(),
        );
        let y = p.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(y, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let x = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let back = p.inverse().transform_point(&p.transform_point(&x));
            assert_relative_eq!(back, x, epsilon = 1e-9);
        }
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let e = p.compose(&p.inverse());
            assert!(e.max_abs_diff(&Pose::identity()) < 1e-9);
            let q = p.inverse().inverse();
            assert!(q.max_abs_diff(&p) < 1e-9);
        }
    }

    #[test]
    fn compose_associative() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }

    #[test]
    fn quaternion_stays_normalized() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut p = Pose::identity();
        for _ in 0..200 {
            let d = Tangent {
                rotation: Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                ),
                translation: Vector3::zeros(),
            };
            p = p.retract(&d);
            assert!((p.rotation.as_vector().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100 {
            let p = random_pose(&mut rng); // rotation angle < sqrt(3) < pi
            let q = p.log().exp();
            assert!(q.max_abs_diff(&p) < 1e-9);
        }
    }

    #[test]
    fn retract_zero_is_identity_map() {
        let mut rng = StdRng::seed_from_u64(6);
        let p = random_pose(&mut rng);
        assert!(p.retract(&Tangent::zero()).max_abs_diff(&p) < 1e-15);
    }

    #[test]
    fn retract_pure_translation() {
        let d = Tangent {
            rotation: Vector3::zeros(),
            translation: Vector3::new(1.0, 0.0, 0.0),
        };
        let p = Pose::identity().retract(&d);
        assert_relative_eq!(p.translation, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert!(p.rotation.angle() < 1e-15);
    }

    #[test]
    fn retract_jacobian_matches_finite_differences() {
        // d(retract(P, δ))/dδ at δ=0, on a transformed probe point.
        let mut rng = StdRng::seed_from_u64(7);
        let p = random_pose(&mut rng);
        let x = Vector3::new(0.3, -0.7, 1.9);
        let h = 1e-6;
        // Analytic: d(exp(δ)∘P)(x)/dδ = [-skew(Px) | I].
        let w = p.transform_point(&x);
        let analytic_rot = -skew(&w);
        for k in 0..6 {
            let mut dv = Vector6::zeros();
            dv[k] = h;
            let plus = p.retract(&Tangent::from_vector(&dv)).transform_point(&x);
            dv[k] = -h;
            let minus = p.retract(&Tangent::from_vector(&dv)).transform_point(&x);
            let fd = (plus - minus) / (2.0 * h);
            let analytic = if k < 3 {
                analytic_rot.column(k).into_owned()
            } else {
                let mut e = Vector3::zeros();
                e[k - 3] = 1.0;
                e
            };
            assert_relative_eq!(fd, analytic, epsilon = 1e-5);
        }
    }

    #[test]
    fn project_on_axis() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101);
        let (u, v, z) = k.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((u, v, z), (50.0, 50.0, 2.0));
    }

    #[test]
    fn project_off_axis_hand_value() {
        // u = fx*x/z + cx = 100*1/2 + 50 = 100.
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101);
        let (u, v, z) = k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((u, v, z), (100.0, 50.0, 2.0));
    }

    #[test]
    fn project_behind_camera_errors() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101);
        assert_eq!(
            k.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth)
        );
    }

    #[test]
    fn unproject_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101);
        assert_relative_eq!(
            k.unproject(50.0, 50.0, 2.0).unwrap(),
            Vector3::new(0.0, 0.0, 2.0),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            k.unproject(100.0, 50.0, 2.0).unwrap(),
            Vector3::new(1.0, 0.0, 2.0),
            epsilon = 1e-15
        );
        assert!(k.unproject(10.0, 10.0, -0.5).is_err());
    }

    #[test]
    fn project_unproject_identity() {
        let k = Intrinsics::new(120.0, 90.0, 63.5, 47.5, 128, 96);
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..100 {
            let u = rng.random_range(0.0..127.0);
            let v = rng.random_range(0.0..95.0);
            let d = rng.random_range(0.01..100.0);
            let p = k.unproject(u, v, d).unwrap();
            let (u2, v2, d2) = k.project(&p).unwrap();
            assert_relative_eq!(u, u2, epsilon = 1e-9);
            assert_relative_eq!(v, v2, epsilon = 1e-9);
            assert_relative_eq!(d, d2, epsilon = 1e-9);
        }
    }
}
