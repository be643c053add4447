//! Damped Gauss-Newton steps for the dense flow objective.
//!
//! `dba_step` optimizes poses and per-pixel disparities jointly; disparities
//! are eliminated pixel-by-pixel through a scalar Schur complement, leaving a
//! `6·P` pose system. `dspo_step` freezes the poses and refines the
//! high-error disparities together with the per-keyframe mono scale/shift.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3, Vector6};

use super::{reprojection_cost, FactorGraph, Keyframe, TrackError};
use crate::geometry::{Intrinsics, Pose, Tangent};

/// Projection depth floor: points at or behind the target camera project
/// through this clamped depth instead of leaving the objective, so the solver
/// cannot trade residual for cheirality violations.
pub(crate) const MIN_TARGET_DEPTH: f64 = 1e-2;

/// Pinhole projection with the depth floor; the z-column of the Jacobian
/// vanishes inside the clamped region.
pub(crate) fn clamped_projection(
    k: &Intrinsics,
    y: &Vector3<f64>,
) -> (Vector2<f64>, nalgebra::Matrix2x3<f64>) {
    let clamped = y[2] < MIN_TARGET_DEPTH;
    let z = if clamped { MIN_TARGET_DEPTH } else { y[2] };
    let iz = 1.0 / z;
    let uv = Vector2::new(k.fx * y[0] * iz + k.cx, k.fy * y[1] * iz + k.cy);
    let (ju_z, jv_z) = if clamped {
        (0.0, 0.0)
    } else {
        (-k.fx * y[0] * iz * iz, -k.fy * y[1] * iz * iz)
    };
    let jac = nalgebra::Matrix2x3::new(k.fx * iz, 0.0, ju_z, 0.0, k.fy * iz, jv_z);
    (uv, jac)
}

const DISPARITY_RANGE: (f64, f64) = (1e-6, 1e6);
const LM_MIN: f64 = 1e-8;
const LM_MAX: f64 = 1e8;
/// Relative eigenvalue below which a reduced-system direction counts as null.
const NULL_EIG_REL: f64 = 1e-10;

/// Which parts of the graph a solver step may move.
#[derive(Clone, Debug)]
pub struct BaContext {
    /// Keyframe indices whose pose and disparity are free.
    pub active: BTreeSet<usize>,
    /// Poses held fixed for gauge (indices, normally the first active one).
    pub gauge_fixed: BTreeSet<usize>,
}

impl BaContext {
    /// Frees all given frames and pins the first as gauge.
    pub fn with_first_fixed(active: impl IntoIterator<Item = usize>) -> Self {
        let active: BTreeSet<usize> = active.into_iter().collect();
        let gauge_fixed = active.iter().next().copied().into_iter().collect();
        Self {
            active,
            gauge_fixed,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted: bool,
    /// Largest pose tangent step norm taken this iteration.
    pub max_pose_step: f64,
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

struct EdgeRef<'a> {
    from: usize,
    to: usize,
    kf_i: &'a Keyframe,
    rel: Pose,
    rot_j_inv: Matrix3<f64>,
    target: &'a crate::grid::VectorField,
    weight: &'a crate::grid::VectorField,
}

/// Per-source-frame disparity system: every pixel couples to the same set of
/// pose variables (those of the frame's edges), so the couplings live in a
/// flat pixel-major array.
struct DispSystem {
    kf_index: usize,
    link_vars: Vec<usize>,
    c: Vec<f64>,
    v: Vec<f64>,
    e: Vec<Vector6<f64>>,
}

/// One damped Gauss-Newton iteration of the joint pose/disparity objective.
///
/// The first gauge-fixed (or otherwise frozen) pose anchors the rigid gauge;
/// the monocular scale direction is left to the damping. Rejected steps leave
/// the graph untouched and raise the damping.
pub fn dba_step(
    graph: &mut FactorGraph,
    intrinsics: &Intrinsics,
    ctx: &BaContext,
) -> Result<BaReport, TrackError> {
    let free_poses: Vec<usize> = ctx
        .active
        .iter()
        .copied()
        .filter(|i| !ctx.gauge_fixed.contains(i))
        .collect();
    let pose_var: Vec<Option<usize>> = {
        let mut v = vec![None; graph.keyframes.len()];
        for (slot, &kf) in free_poses.iter().enumerate() {
            v[kf] = Some(slot);
        }
        v
    };
    let dim = free_poses.len() * 6;

    let edges: Vec<EdgeRef> = graph
        .edges
        .iter()
        .filter(|e| {
            ctx.active.contains(&e.from.0)
                || pose_var[e.from.0].is_some()
                || pose_var[e.to.0].is_some()
        })
        .map(|e| {
            let kf_i = &graph.keyframes[e.from.0];
            let kf_j = &graph.keyframes[e.to.0];
            EdgeRef {
                from: e.from.0,
                to: e.to.0,
                kf_i,
                rel: kf_j.pose.inverse().compose(&kf_i.pose),
                rot_j_inv: kf_j.pose.inverse().rotation_matrix(),
                target: &e.target,
                weight: &e.weight,
            }
        })
        .collect();
    if edges.is_empty() {
        return Err(TrackError::SingularSystem);
    }

    let mut b_mat = DMatrix::<f64>::zeros(dim, dim);
    let mut g = DVector::<f64>::zeros(dim);
    // Schur pieces with undamped disparity information, so the damped system
    // can be formed by pure scaling afterwards.
    let mut m_mat = DMatrix::<f64>::zeros(dim, dim);
    let mut u = DVector::<f64>::zeros(dim);

    let mut disp_systems: Vec<DispSystem> = Vec::new();
    let mut disp_slot = vec![usize::MAX; graph.keyframes.len()];
    for &f in &ctx.active {
        let kf = &graph.keyframes[f];
        let npx = kf.disparity.len();
        let mut link_vars: Vec<usize> = Vec::new();
        if let Some(var) = pose_var[f] {
            link_vars.push(var);
        }
        for e in &edges {
            if e.from == f {
                if let Some(var) = pose_var[e.to] {
                    if !link_vars.contains(&var) {
                        link_vars.push(var);
                    }
                }
            }
        }
        disp_slot[f] = disp_systems.len();
        let nl = link_vars.len();
        disp_systems.push(DispSystem {
            kf_index: f,
            link_vars,
            c: vec![0.0; npx],
            v: vec![0.0; npx],
            e: vec![Vector6::zeros(); npx * nl],
        });
    }

    let mut total_weight = 0.0;
    for edge in &edges {
        let var_i = pose_var[edge.from];
        let var_j = pose_var[edge.to];
        let disp = (disp_slot[edge.from] != usize::MAX).then(|| disp_slot[edge.from]);
        let (w, h) = (edge.target.width(), edge.target.height());
        let slot_i = disp.map(|s| {
            var_i.and_then(|v| disp_systems[s].link_vars.iter().position(|&x| x == v))
        });
        let slot_j = disp.map(|s| {
            var_j.and_then(|v| disp_systems[s].link_vars.iter().position(|&x| x == v))
        });

        for y in 0..h {
            for x in 0..w {
                let d = *edge.kf_i.disparity.get(x, y);
                if d <= 0.0 {
                    continue;
                }
                let wgt = *edge.weight.get(x, y);
                if wgt[0] <= 0.0 && wgt[1] <= 0.0 {
                    continue;
                }
                let cam_i = intrinsics.ray(x as f64, y as f64) / d;
                let cam_j = edge.rel.transform_point(&cam_i);
                let (proj, j_proj) = clamped_projection(intrinsics, &cam_j);
                let r = edge.target.get(x, y) - proj;
                total_weight += wgt[0] + wgt[1];
                // ∂r/∂θ = -J_proj · ∂Y/∂θ with Y the target-frame point.
                let j_d: Vector2<f64> = j_proj * ((cam_j - edge.rel.translation) / d);
                let j_i: Option<nalgebra::Matrix2x6<f64>> = var_i.map(|_| {
                    let w_pt = edge.kf_i.pose.transform_point(&cam_i);
                    let mut m = nalgebra::Matrix2x6::zeros();
                    let lin = j_proj * edge.rot_j_inv;
                    m.fixed_view_mut::<2, 3>(0, 0)
                        .copy_from(&(lin * skew(&w_pt)));
                    m.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-lin));
                    m
                });
                // ∂Y/∂δ_j = -∂Y/∂δ_i at the same world point.
                let j_j = var_j.map(|_| {
                    let w_pt = edge.kf_i.pose.transform_point(&cam_i);
                    let mut m = nalgebra::Matrix2x6::zeros();
                    let lin = j_proj * edge.rot_j_inv;
                    m.fixed_view_mut::<2, 3>(0, 0)
                        .copy_from(&(-(lin * skew(&w_pt))));
                    m.fixed_view_mut::<2, 3>(0, 3).copy_from(&lin);
                    m
                });

                let wdiag = Matrix2::new(wgt[0], 0.0, 0.0, wgt[1]);
                let add_block = |b: &mut DMatrix<f64>,
                                 va: usize,
                                 vb: usize,
                                 ja: &nalgebra::Matrix2x6<f64>,
                                 jb: &nalgebra::Matrix2x6<f64>| {
                    let block = ja.transpose() * wdiag * jb;
                    let mut view = b.view_mut((va * 6, vb * 6), (6, 6));
                    view += block;
                };

                if let (Some(va), Some(ja)) = (var_i, j_i.as_ref()) {
                    add_block(&mut b_mat, va, va, ja, ja);
                    let gr = ja.transpose() * (wdiag * r);
                    g.rows_mut(va * 6, 6).zip_apply(&gr, |a, b| *a += b);
                }
                if let (Some(vb), Some(jb)) = (var_j, j_j.as_ref()) {
                    add_block(&mut b_mat, vb, vb, jb, jb);
                    let gr = jb.transpose() * (wdiag * r);
                    g.rows_mut(vb * 6, 6).zip_apply(&gr, |a, b| *a += b);
                }
                if let (Some(va), Some(ja), Some(vb), Some(jb)) =
                    (var_i, j_i.as_ref(), var_j, j_j.as_ref())
                {
                    add_block(&mut b_mat, va, vb, ja, jb);
                    add_block(&mut b_mat, vb, va, jb, ja);
                }

                if let Some(s) = disp {
                    let sys = &mut disp_systems[s];
                    let px = y * w + x;
                    let jw = Vector2::new(j_d[0] * wgt[0], j_d[1] * wgt[1]);
                    sys.c[px] += jw.dot(&j_d);
                    sys.v[px] += jw.dot(&r);
                    let nl = sys.link_vars.len();
                    if let (Some(slot), Some(ja)) = (slot_i.flatten(), j_i.as_ref()) {
                        sys.e[px * nl + slot] += ja.transpose() * jw;
                    }
                    if let (Some(slot), Some(jb)) = (slot_j.flatten(), j_j.as_ref()) {
                        sys.e[px * nl + slot] += jb.transpose() * jw;
                    }
                }
            }
        }
    }

    if total_weight <= 0.0 {
        return Err(TrackError::SingularSystem);
    }

    // Reduce the disparities into M and u (undamped).
    for sys in &disp_systems {
        let nl = sys.link_vars.len();
        for px in 0..sys.c.len() {
            let c = sys.c[px];
            if c <= 1e-12 {
                continue;
            }
            let inv_c = 1.0 / c;
            for a in 0..nl {
                let ea = &sys.e[px * nl + a];
                if ea == &Vector6::zeros() {
                    continue;
                }
                let va = sys.link_vars[a];
                u.rows_mut(va * 6, 6)
                    .zip_apply(&(ea * (sys.v[px] * inv_c)), |x, y| *x += y);
                for b in 0..nl {
                    let eb = &sys.e[px * nl + b];
                    let vb = sys.link_vars[b];
                    let block = ea * eb.transpose() * inv_c;
                    let mut view = m_mat.view_mut((va * 6, vb * 6), (6, 6));
                    view += block;
                }
            }
        }
    }

    if dim > 0 {
        let s0 = &b_mat - &m_mat;
        let eigs = s0.clone().symmetric_eigenvalues();
        let max_eig = eigs.iter().cloned().fold(f64::MIN, f64::max);
        if !(max_eig > 0.0) {
            return Err(TrackError::SingularSystem);
        }
        let nullity = eigs.iter().filter(|&&l| l < NULL_EIG_REL * max_eig).count();
        // One soft direction (the monocular scale) is expected; anything more
        // means the graph does not constrain the poses.
        if nullity > 1 {
            return Err(TrackError::SingularSystem);
        }
    }

    let initial_cost = reprojection_cost(&graph.keyframes, &graph.edges, intrinsics);
    let lambda = graph.lm_dba;
    let shrink = 1.0 / (1.0 + lambda);

    let delta = if dim > 0 {
        let mut s = &b_mat - &m_mat * shrink;
        for i in 0..dim {
            s[(i, i)] += lambda * b_mat[(i, i)].max(1e-12);
        }
        let rhs = &g - &u * shrink;
        // Negative gradient direction: normal equations solve H δ = -∇F,
        // and g, u above accumulated +Jᵀ W r, so flip here.
        let rhs = -rhs;
        match s.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => {
                graph.lm_dba = (lambda * 10.0).min(LM_MAX);
                return Ok(BaReport {
                    initial_cost,
                    final_cost: initial_cost,
                    accepted: false,
                    max_pose_step: 0.0,
                });
            }
        }
    } else {
        DVector::zeros(0)
    };

    // Tentative update: poses, then back-substituted disparities.
    let saved_poses: Vec<(usize, Pose)> = free_poses
        .iter()
        .map(|&i| (i, graph.keyframes[i].pose))
        .collect();
    let saved_disp: Vec<(usize, Vec<f64>)> = disp_systems
        .iter()
        .map(|s| (s.kf_index, graph.keyframes[s.kf_index].disparity.as_slice().to_vec()))
        .collect();

    let mut max_pose_step = 0.0f64;
    for (slot, &kf) in free_poses.iter().enumerate() {
        let t = Tangent::from_vector(&delta.fixed_rows::<6>(slot * 6).into_owned());
        max_pose_step = max_pose_step.max(t.norm());
        let kf = &mut graph.keyframes[kf];
        kf.pose = kf.pose.retract(&t);
    }
    for sys in &disp_systems {
        let nl = sys.link_vars.len();
        let disp = graph.keyframes[sys.kf_index].disparity.as_mut_slice();
        for px in 0..sys.c.len() {
            let c = sys.c[px];
            if c <= 1e-12 {
                continue;
            }
            let mut rhs = -sys.v[px];
            for a in 0..nl {
                let va = sys.link_vars[a];
                rhs -= sys.e[px * nl + a].dot(&delta.rows(va * 6, 6));
            }
            let step = rhs / (c * (1.0 + lambda));
            disp[px] = (disp[px] + step).clamp(DISPARITY_RANGE.0, DISPARITY_RANGE.1);
        }
    }

    let final_cost = reprojection_cost(&graph.keyframes, &graph.edges, intrinsics);
    if final_cost <= initial_cost * (1.0 + 1e-12) {
        graph.lm_dba = (lambda / 10.0).max(LM_MIN);
        Ok(BaReport {
            initial_cost,
            final_cost,
            accepted: true,
            max_pose_step,
        })
    } else {
        for (i, pose) in saved_poses {
            graph.keyframes[i].pose = pose;
        }
        for (i, disp) in saved_disp {
            graph.keyframes[i]
                .disparity
                .as_mut_slice()
                .copy_from_slice(&disp);
        }
        graph.lm_dba = (lambda * 10.0).min(LM_MAX);
        Ok(BaReport {
            initial_cost,
            final_cost: initial_cost,
            accepted: false,
            max_pose_step,
        })
    }
}

/// Full objective of the mono-regularized refinement: flow term plus the two
/// scale/shift data terms.
pub fn dspo_objective(
    graph: &FactorGraph,
    intrinsics: &Intrinsics,
    active: &BTreeSet<usize>,
    alpha1: f64,
    alpha2: f64,
) -> f64 {
    let mut cost = reprojection_cost(&graph.keyframes, &graph.edges, intrinsics);
    for &f in active {
        let kf = &graph.keyframes[f];
        for (x, y, &d) in kf.disparity.pixels() {
            let mono = *kf.mono_depth.get(x, y);
            if d <= 0.0 || mono <= 0.0 {
                continue;
            }
            let m = d - (kf.scale / mono + kf.shift);
            let w = if *kf.low_error.get(x, y) { alpha2 } else { alpha1 };
            cost += w * m * m;
        }
    }
    cost
}

/// One damped Gauss-Newton iteration over the high-error disparities and the
/// per-keyframe scale/shift, with all poses frozen.
///
/// Pixels keep their classification from the last consistency pass: low-error
/// disparities act as scale anchors (weight `α₂`), high-error ones are free
/// and tied to the mono prior with weight `α₁ < α₂`.
pub fn dspo_step(
    graph: &mut FactorGraph,
    intrinsics: &Intrinsics,
    ctx: &BaContext,
    alpha1: f64,
    alpha2: f64,
) -> Result<BaReport, TrackError> {
    struct FrameSystem {
        kf: usize,
        a: Matrix2<f64>,
        b: Vector2<f64>,
        // Per high-error pixel: (pixel index, c, v, e).
        high: Vec<(usize, f64, f64, Vector2<f64>)>,
        q_sum: f64,
        q_sq_sum: f64,
        q_count: usize,
    }

    let lambda = graph.lm_dspo;
    let initial = dspo_objective(graph, intrinsics, &ctx.active, alpha1, alpha2);

    let mut systems: Vec<FrameSystem> = Vec::new();
    for &f in &ctx.active {
        let kf = &graph.keyframes[f];
        let (w, h) = (kf.disparity.width(), kf.disparity.height());
        let npx = w * h;
        let mut sys = FrameSystem {
            kf: f,
            a: Matrix2::zeros(),
            b: Vector2::zeros(),
            high: Vec::new(),
            q_sum: 0.0,
            q_sq_sum: 0.0,
            q_count: 0,
        };
        // Flow information for the frame's high-error pixels.
        let mut c_flow = vec![0.0f64; npx];
        let mut v_flow = vec![0.0f64; npx];
        for edge in &graph.edges {
            if edge.from.0 != f {
                continue;
            }
            let kf_j = &graph.keyframes[edge.to.0];
            let rel = kf_j.pose.inverse().compose(&kf.pose);
            for y in 0..h {
                for x in 0..w {
                    if *kf.low_error.get(x, y) {
                        continue;
                    }
                    let d = *kf.disparity.get(x, y);
                    if d <= 0.0 {
                        continue;
                    }
                    let wgt = *edge.weight.get(x, y);
                    if wgt[0] <= 0.0 && wgt[1] <= 0.0 {
                        continue;
                    }
                    let cam_i = intrinsics.ray(x as f64, y as f64) / d;
                    let cam_j = rel.transform_point(&cam_i);
                    let (proj, j_proj) = clamped_projection(intrinsics, &cam_j);
                    let r = edge.target.get(x, y) - proj;
                    let j_d: Vector2<f64> = j_proj * ((cam_j - rel.translation) / d);
                    let jw = Vector2::new(j_d[0] * wgt[0], j_d[1] * wgt[1]);
                    let px = y * w + x;
                    c_flow[px] += jw.dot(&j_d);
                    v_flow[px] -= jw.dot(&r);
                }
            }
        }

        for y in 0..h {
            for x in 0..w {
                let d = *kf.disparity.get(x, y);
                let mono = *kf.mono_depth.get(x, y);
                if d <= 0.0 || mono <= 0.0 {
                    continue;
                }
                let q = 1.0 / mono;
                sys.q_sum += q;
                sys.q_sq_sum += q * q;
                sys.q_count += 1;
                let m = d - (kf.scale * q + kf.shift);
                let qg = Vector2::new(q, 1.0);
                if *kf.low_error.get(x, y) {
                    sys.a += alpha2 * qg * qg.transpose();
                    sys.b += alpha2 * qg * m;
                } else {
                    let px = y * w + x;
                    let c = c_flow[px] + alpha1;
                    let v = v_flow[px] - alpha1 * m;
                    let e = Vector2::new(-alpha1 * q, -alpha1);
                    sys.a += alpha1 * qg * qg.transpose();
                    sys.b += alpha1 * qg * m;
                    sys.high.push((px, c, v, e));
                }
            }
        }
        if sys.q_count == 0 {
            continue;
        }
        let mean_q = sys.q_sum / sys.q_count as f64;
        let var_q = sys.q_sq_sum / sys.q_count as f64 - mean_q * mean_q;
        if sys.q_count < 2 || var_q <= 1e-12 * (sys.q_sq_sum / sys.q_count as f64).max(1e-30) {
            return Err(TrackError::DegenerateFit);
        }
        systems.push(sys);
    }

    // Solve each frame's reduced 2x2 system and back-substitute.
    let mut saved: Vec<(usize, f64, f64, Vec<f64>)> = Vec::new();
    for sys in &systems {
        let kf = &graph.keyframes[sys.kf];
        saved.push((sys.kf, kf.scale, kf.shift, kf.disparity.as_slice().to_vec()));
    }
    for sys in &systems {
        let mut a = sys.a;
        let mut b = sys.b;
        a[(0, 0)] *= 1.0 + lambda;
        a[(1, 1)] *= 1.0 + lambda;
        for &(_, c, v, e) in &sys.high {
            let c_l = c * (1.0 + lambda);
            a -= e * e.transpose() / c_l;
            b -= e * (v / c_l);
        }
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        if det.abs() < 1e-300 {
            return Err(TrackError::DegenerateFit);
        }
        let dx = Vector2::new(
            (a[(1, 1)] * b[0] - a[(0, 1)] * b[1]) / det,
            (a[(0, 0)] * b[1] - a[(1, 0)] * b[0]) / det,
        );
        let kf = &mut graph.keyframes[sys.kf];
        kf.scale += dx[0];
        kf.shift += dx[1];
        let disp = kf.disparity.as_mut_slice();
        for &(px, c, v, e) in &sys.high {
            let step = (v - e.dot(&dx)) / (c * (1.0 + lambda));
            disp[px] = (disp[px] + step).clamp(DISPARITY_RANGE.0, DISPARITY_RANGE.1);
        }
    }

    let final_cost = dspo_objective(graph, intrinsics, &ctx.active, alpha1, alpha2);
    if final_cost <= initial * (1.0 + 1e-12) {
        graph.lm_dspo = (lambda / 10.0).max(LM_MIN);
        Ok(BaReport {
            initial_cost: initial,
            final_cost,
            accepted: true,
            max_pose_step: 0.0,
        })
    } else {
        for (kf, scale, shift, disp) in saved {
            let kf = &mut graph.keyframes[kf];
            kf.scale = scale;
            kf.shift = shift;
            kf.disparity.as_mut_slice().copy_from_slice(&disp);
        }
        graph.lm_dspo = (lambda * 10.0).min(LM_MAX);
        Ok(BaReport {
            initial_cost: initial,
            final_cost: initial,
            accepted: false,
            max_pose_step: 0.0,
        })
    }
}
