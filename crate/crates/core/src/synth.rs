//! Synthetic stand-in for the neural front-ends: an analytic world that
//! serves images, ground-truth depth, dense flow with confidence, and
//! affine-distorted monocular depth, all deterministic under a seed.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{FlowField, FrameData, FrameSource};
use crate::geometry::{Intrinsics, Pose};
use crate::grid::{ColorImage, DepthMap, Grid};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveSpec {
    /// Infinite textured plane through `point` with unit `normal`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        color: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f64; 3],
    },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LookMode {
    Center,
    Outward,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Static {
        frames: usize,
    },
    Line {
        start: [f64; 3],
        end: [f64; 3],
        target: [f64; 3],
        frames: usize,
    },
    Orbit {
        center: [f64; 3],
        radius: f64,
        height: f64,
        revolutions: f64,
        frames: usize,
        look: LookMode,
    },
}

/// Front-end noise model: flow noise in pixels; mono depth generated as
/// `(gt - shift)/scale + N(0, (sigma_rel·gt)²)` so the true depth-space
/// recovery is `θ = scale, γ = shift`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub flow_sigma: f64,
    pub mono_scale: f64,
    pub mono_shift: f64,
    pub mono_sigma_rel: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            flow_sigma: 0.0,
            mono_scale: 1.0,
            mono_shift: 0.0,
            mono_sigma_rel: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldSpec {
    pub camera: CameraSpec,
    pub primitives: Vec<PrimitiveSpec>,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of pixels each trajectory pose must cover.
    #[serde(default = "default_coverage")]
    pub min_coverage: f64,
}

fn default_coverage() -> f64 {
    0.3
}

enum Primitive {
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
        color: Vector3<f64>,
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
        color: Vector3<f64>,
    },
}

impl Primitive {
    /// Ray parameter of the nearest hit; with an unnormalized direction whose
    /// camera-frame z is 1, the parameter equals the camera depth.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Plane { point, normal, .. } => {
                let denom = dir.dot(normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - origin).dot(normal) / denom;
                (t > 1e-6).then_some(t)
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let b = 2.0 * dir.dot(&oc);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                if t0 > 1e-6 {
                    Some(t0)
                } else if t1 > 1e-6 {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    fn base_color(&self) -> Vector3<f64> {
        match self {
            Primitive::Plane { color, .. } | Primitive::Sphere { color, .. } => *color,
        }
    }
}

/// Bundled per-frame front-end output, mirroring what the neural models would
/// produce.
#[derive(Clone, Debug)]
pub struct FrontendObservation {
    pub image: ColorImage,
    pub gt_depth: DepthMap,
    pub mono_depth: DepthMap,
    pub flows: Vec<(usize, FlowField)>,
}

pub struct SyntheticWorld {
    intrinsics: Intrinsics,
    primitives: Vec<Primitive>,
    trajectory: Vec<Pose>,
    noise: NoiseSpec,
    seed: u64,
}

/// Right-handed camera-to-world rotation with +z looking from `eye` toward
/// `target`.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let forward = (target - eye).normalize();
    let hint = if forward.dot(&Vector3::y()).abs() < 0.99 {
        Vector3::y()
    } else {
        Vector3::x()
    };
    let right = hint.cross(&forward).normalize();
    let down = forward.cross(&right);
    let rot = Matrix3::from_columns(&[right, down, forward]);
    Pose::new(
        UnitQuaternion::from_matrix(&rot),
        eye,
    )
}

impl SyntheticWorld {
    pub fn generate(spec: &WorldSpec) -> Result<Self, SynthError> {
        if spec.primitives.is_empty() {
            return Err(SynthError::InvalidSpec("no primitives".into()));
        }
        let primitives: Vec<Primitive> = spec
            .primitives
            .iter()
            .map(|p| match p {
                PrimitiveSpec::Plane {
                    point,
                    normal,
                    color,
                } => {
                    let n = Vector3::from(*normal);
                    if n.norm() < 1e-9 {
                        return Err(SynthError::InvalidSpec("zero plane normal".into()));
                    }
                    Ok(Primitive::Plane {
                        point: Vector3::from(*point),
                        normal: n.normalize(),
                        color: Vector3::from(*color),
                    })
                }
                PrimitiveSpec::Sphere {
                    center,
                    radius,
                    color,
                } => {
                    if *radius <= 0.0 {
                        return Err(SynthError::InvalidSpec("non-positive sphere radius".into()));
                    }
                    Ok(Primitive::Sphere {
                        center: Vector3::from(*center),
                        radius: *radius,
                        color: Vector3::from(*color),
                    })
                }
            })
            .collect::<Result<_, _>>()?;

        let trajectory = build_trajectory(&spec.trajectory)?;
        if trajectory.is_empty() {
            return Err(SynthError::InvalidSpec("empty trajectory".into()));
        }
        let world = Self {
            intrinsics: spec.camera.intrinsics(),
            primitives,
            trajectory,
            noise: spec.noise.clone(),
            seed: spec.seed,
        };
        for (i, pose) in world.trajectory.iter().enumerate() {
            let cov = world.coverage(pose);
            if cov < spec.min_coverage {
                return Err(SynthError::InvalidSpec(format!(
                    "pose {i} sees only {:.0}% of the scene",
                    cov * 100.0
                )));
            }
        }
        Ok(world)
    }

    pub fn trajectory(&self) -> &[Pose] {
        &self.trajectory
    }

    fn coverage(&self, pose: &Pose) -> f64 {
        let mut hit = 0usize;
        let mut total = 0usize;
        let k = &self.intrinsics;
        let mut y = 0;
        while y < k.height {
            let mut x = 0;
            while x < k.width {
                total += 1;
                if self.cast(pose, x as f64, y as f64).is_some() {
                    hit += 1;
                }
                x += 4;
            }
            y += 4;
        }
        hit as f64 / total as f64
    }

    /// Nearest surface along the pixel ray: `(camera depth, world point,
    /// primitive index)`.
    fn cast(&self, pose: &Pose, u: f64, v: f64) -> Option<(f64, Vector3<f64>, usize)> {
        let dir = pose.rotation * self.intrinsics.ray(u, v);
        let origin = pose.translation;
        let mut best: Option<(f64, usize)> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some(t) = prim.hit(&origin, &dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best.map(|(t, i)| (t, origin + dir * t, i))
    }

    fn texture(&self, prim: usize, point: &Vector3<f64>) -> Vector3<f64> {
        let base = self.primitives[prim].base_color();
        let freq = 1.7;
        let mut c = base;
        for ch in 0..3 {
            let n = value_noise3(
                point * freq,
                self.seed ^ (prim as u64) << 8 ^ (ch as u64 + 1),
            );
            c[ch] = (base[ch] + 0.35 * (n - 0.5)).clamp(0.05, 0.95);
        }
        c
    }

    fn rng(&self, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
        let mut s = self.seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
        s ^= a.wrapping_mul(0xC2B2AE3D27D4EB4F);
        s ^= b.wrapping_mul(0x165667B19E3779F9);
        ChaCha8Rng::seed_from_u64(splitmix(s))
    }

    pub fn image(&self, frame: usize) -> ColorImage {
        let pose = self.trajectory[frame];
        Grid::from_fn(self.intrinsics.width, self.intrinsics.height, |x, y| {
            match self.cast(&pose, x as f64, y as f64) {
                Some((_, p, prim)) => self.texture(prim, &p),
                None => Vector3::zeros(),
            }
        })
    }

    pub fn depth(&self, frame: usize) -> DepthMap {
        let pose = self.trajectory[frame];
        Grid::from_fn(self.intrinsics.width, self.intrinsics.height, |x, y| {
            self.cast(&pose, x as f64, y as f64).map_or(0.0, |(t, ..)| t)
        })
    }

    pub fn mono(&self, frame: usize) -> DepthMap {
        let gt = self.depth(frame);
        let mut rng = self.rng(0x4d4f4e4f, frame as u64, 0);
        gt.map(|&d| {
            let noise: f64 = if self.noise.mono_sigma_rel > 0.0 {
                gaussian(&mut rng) * self.noise.mono_sigma_rel * d
            } else {
                // Keep the stream aligned whether or not noise is enabled.
                0.0
            };
            if d <= 0.0 {
                0.0
            } else {
                ((d - self.noise.mono_shift) / self.noise.mono_scale + noise).max(1e-6)
            }
        })
    }

    /// Exact geometric correspondence of pixel `(x, y)` from `from` into
    /// `to`, or `None` when occluded or out of frustum.
    fn correspondence(&self, from: usize, to: usize, x: f64, y: f64) -> Option<Vector2<f64>> {
        let (_, point, _) = self.cast(&self.trajectory[from], x, y)?;
        let cam_j = self.trajectory[to].inverse().transform_point(&point);
        if cam_j[2] <= 1e-6 {
            return None;
        }
        let (u, v, z) = self.intrinsics.project(&cam_j).ok()?;
        if !self.intrinsics.in_bounds(u, v) {
            return None;
        }
        // Occlusion: the nearest surface along the target ray must be the
        // same point (analytic cast, 1e-6 m tolerance).
        let (t_hit, ..) = self.cast(&self.trajectory[to], u, v)?;
        if t_hit < z - 1e-6 {
            return None;
        }
        Some(Vector2::new(u, v))
    }

    pub fn flow_between(&self, from: usize, to: usize) -> FlowField {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let mut rng = self.rng(0x464c4f57, from as u64, to as u64);
        let sigma = self.noise.flow_sigma;
        let conf = if sigma > 0.0 { 1.0 / (sigma * sigma) } else { 1.0 };
        let mut target = Grid::filled(w, h, Vector2::zeros());
        let mut confidence = Grid::filled(w, h, Vector2::zeros());
        for y in 0..h {
            for x in 0..w {
                // Two draws per pixel regardless of visibility keeps the
                // noise stream deterministic under occlusion changes.
                let (nx, ny) = (gaussian(&mut rng), gaussian(&mut rng));
                if let Some(p) = self.correspondence(from, to, x as f64, y as f64) {
                    *target.get_mut(x, y) = p + Vector2::new(nx, ny) * sigma;
                    *confidence.get_mut(x, y) = Vector2::new(conf, conf);
                }
            }
        }
        FlowField { target, confidence }
    }

    /// Noise-free mean flow magnitude on a stride-4 grid.
    pub fn mean_flow_between(&self, from: usize, to: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut y = 0;
        while y < self.intrinsics.height {
            let mut x = 0;
            while x < self.intrinsics.width {
                if let Some(p) = self.correspondence(from, to, x as f64, y as f64) {
                    sum += (p - Vector2::new(x as f64, y as f64)).norm();
                    n += 1;
                }
                x += 4;
            }
            y += 4;
        }
        if n == 0 {
            f64::INFINITY
        } else {
            sum / n as f64
        }
    }

    pub fn observe(&self, frame: usize, flow_targets: &[usize]) -> FrontendObservation {
        FrontendObservation {
            image: self.image(frame),
            gt_depth: self.depth(frame),
            mono_depth: self.mono(frame),
            flows: flow_targets
                .iter()
                .map(|&t| (t, self.flow_between(frame, t)))
                .collect(),
        }
    }
}

impl FrameSource for SyntheticWorld {
    fn len(&self) -> usize {
        self.trajectory.len()
    }

    fn intrinsics(&self) -> Intrinsics {
        self.intrinsics
    }

    fn frame(&self, index: usize) -> FrameData {
        FrameData {
            image: self.image(index),
            mono_depth: self.mono(index),
        }
    }

    fn flow(&self, from: usize, to: usize) -> FlowField {
        self.flow_between(from, to)
    }

    fn mean_flow(&self, from: usize, to: usize) -> f64 {
        self.mean_flow_between(from, to)
    }

    fn gt_pose(&self, index: usize) -> Option<Pose> {
        self.trajectory.get(index).copied()
    }

    fn gt_depth(&self, index: usize) -> Option<DepthMap> {
        (index < self.trajectory.len()).then(|| self.depth(index))
    }
}

fn build_trajectory(spec: &TrajectorySpec) -> Result<Vec<Pose>, SynthError> {
    match spec {
        TrajectorySpec::Static { frames } => Ok(vec![
            look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
            *frames
        ]),
        TrajectorySpec::Line {
            start,
            end,
            target,
            frames,
        } => {
            if *frames == 0 {
                return Err(SynthError::InvalidSpec("zero frames".into()));
            }
            let (s, e, t) = (
                Vector3::from(*start),
                Vector3::from(*end),
                Vector3::from(*target),
            );
            Ok((0..*frames)
                .map(|i| {
                    let a = if *frames == 1 {
                        0.0
                    } else {
                        i as f64 / (*frames - 1) as f64
                    };
                    look_at(s + (e - s) * a, t)
                })
                .collect())
        }
        TrajectorySpec::Orbit {
            center,
            radius,
            height,
            revolutions,
            frames,
            look,
        } => {
            if *frames == 0 {
                return Err(SynthError::InvalidSpec("zero frames".into()));
            }
            let c = Vector3::from(*center);
            Ok((0..*frames)
                .map(|i| {
                    let phi = std::f64::consts::TAU * revolutions * i as f64 / *frames as f64;
                    let eye = c + Vector3::new(radius * phi.cos(), radius * phi.sin(), *height);
                    let target = match look {
                        LookMode::Center => c,
                        LookMode::Outward => c + (eye - c) * 3.0,
                    };
                    look_at(eye, target)
                })
                .collect())
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(
        seed ^ (x as u64).wrapping_mul(0x9E3779B97F4A7C15)
            ^ (y as u64).wrapping_mul(0xC2B2AE3D27D4EB4F)
            ^ (z as u64).wrapping_mul(0x165667B19E3779F9),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth 3D value noise in [0, 1].
pub fn value_noise3(p: Vector3<f64>, seed: u64) -> f64 {
    let cell = p.map(f64::floor);
    let frac = p - cell;
    let (ix, iy, iz) = (cell[0] as i64, cell[1] as i64, cell[2] as i64);
    let (tx, ty, tz) = (smoothstep(frac[0]), smoothstep(frac[1]), smoothstep(frac[2]));
    let mut v = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { tx } else { 1.0 - tx })
                    * (if dy == 1 { ty } else { 1.0 - ty })
                    * (if dz == 1 { tz } else { 1.0 - tz });
                v += w * lattice(seed, ix + dx, iy + dy, iz + dz);
            }
        }
    }
    v
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Enclosed room with textured walls and two spheres; the camera orbits
/// inside. Used by the closed-loop tests and as the default synthetic scene.
pub fn room_spec(width: usize, height: usize, frames: usize, revolutions: f64, noise: NoiseSpec, seed: u64) -> WorldSpec {
    // Slightly tilted walls: no orbit view is ever fronto-parallel, so depth
    // varies within every frame (keeps the mono scale/shift identifiable).
    let half = 3.0;
    let walls = [
        ([half, 0.0, 0.0], [-1.0, 0.12, 0.07], [0.75, 0.35, 0.30]),
        ([-half, 0.0, 0.0], [1.0, 0.09, -0.11], [0.30, 0.65, 0.35]),
        ([0.0, half, 0.0], [0.08, -1.0, 0.10], [0.30, 0.40, 0.75]),
        ([0.0, -half, 0.0], [-0.06, 1.0, 0.09], [0.70, 0.65, 0.30]),
        ([0.0, 0.0, half], [0.11, 0.05, -1.0], [0.55, 0.55, 0.55]),
        ([0.0, 0.0, -half], [-0.04, 0.13, 1.0], [0.45, 0.30, 0.60]),
    ];
    let mut primitives: Vec<PrimitiveSpec> = walls
        .iter()
        .map(|(p, n, c)| PrimitiveSpec::Plane {
            point: *p,
            normal: *n,
            color: *c,
        })
        .collect();
    // Spheres near the walls so the outward-looking orbit always has
    // non-planar structure in view.
    primitives.push(PrimitiveSpec::Sphere {
        center: [2.1, 1.1, 0.3],
        radius: 0.65,
        color: [0.80, 0.55, 0.25],
    });
    primitives.push(PrimitiveSpec::Sphere {
        center: [-1.7, -1.9, -0.4],
        radius: 0.8,
        color: [0.25, 0.60, 0.70],
    });
    primitives.push(PrimitiveSpec::Sphere {
        center: [-0.5, 2.2, -0.2],
        radius: 0.55,
        color: [0.62, 0.30, 0.62],
    });
    primitives.push(PrimitiveSpec::Sphere {
        center: [1.6, -2.0, 0.4],
        radius: 0.6,
        color: [0.35, 0.62, 0.40],
    });
    WorldSpec {
        camera: CameraSpec {
            width,
            height,
            fx: width as f64 * 0.72,
            fy: width as f64 * 0.72,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        },
        primitives,
        trajectory: TrajectorySpec::Orbit {
            center: [0.0, 0.0, 0.0],
            radius: 1.0,
            height: 0.0,
            revolutions,
            frames,
            look: LookMode::Outward,
        },
        noise,
        seed,
        min_coverage: 0.3,
    }
}
