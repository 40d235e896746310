//! Robust 6-DOF pose estimation from 3D-2D correspondences: RANSAC over a
//! P3P minimal engine with Gauss-Newton reprojection refinement.
//!
//! The recovered pose maps source-frame 3D points into the camera frame,
//! `p = K (R x + t)` after homogeneous normalization.

use crate::geometry::{project_to_so3, CameraModel, RigidTransform};
use nalgebra::{DMatrix, Matrix3, Matrix6, Point3, Vector2, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnpError {
    #[error("need at least {need} correspondences, got {got}")]
    NotEnoughPoints { need: usize, got: usize },
    #[error("points3d and points2d lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("duplicate 3D points at indices {0} and {1}")]
    DuplicatePoints(usize, usize),
    #[error("no consensus: best model had {best_seen} inliers, needed {needed}")]
    NoConsensus { best_seen: usize, needed: usize },
    #[error("mask selects no correspondence")]
    EmptyMask,
}

/// A 3D-2D correspondence problem.
#[derive(Debug, Clone)]
pub struct PnpProblem {
    pub points3d: Vec<Point3<f64>>,
    pub points2d: Vec<Vector2<f64>>,
    pub camera: CameraModel,
}

impl PnpProblem {
    pub fn new(
        points3d: Vec<Point3<f64>>,
        points2d: Vec<Vector2<f64>>,
        camera: CameraModel,
    ) -> Result<Self, PnpError> {
        if points3d.len() != points2d.len() {
            return Err(PnpError::LengthMismatch(points3d.len(), points2d.len()));
        }
        if points3d.len() < 4 {
            return Err(PnpError::NotEnoughPoints {
                need: 4,
                got: points3d.len(),
            });
        }
        for i in 0..points3d.len() {
            for j in (i + 1)..points3d.len() {
                if (points3d[i] - points3d[j]).norm() < 1e-9 {
                    return Err(PnpError::DuplicatePoints(i, j));
                }
            }
        }
        Ok(Self {
            points3d,
            points2d,
            camera,
        })
    }

    pub fn len(&self) -> usize {
        self.points3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points3d.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Maximum pixel reprojection error for an inlier.
    pub inlier_threshold: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 2.0,
            max_iters: 1000,
            confidence: 0.999,
            min_inliers: 4,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PnpSolution {
    pub pose: RigidTransform,
    pub inlier_mask: Vec<bool>,
    pub rms_reproj: f64,
}

impl PnpSolution {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// Real roots of `c4 x^4 + c3 x^3 + c2 x^2 + c1 x + c0 = 0` via the
/// companion-matrix eigenvalues, degree-reduced when leading terms vanish.
fn real_roots(coeffs: [f64; 5]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let c: Vec<f64> = coeffs.iter().map(|v| v / scale).collect();
    // coefficients ordered [c0, c1, c2, c3, c4]
    let mut degree = 4usize;
    while degree > 0 && c[degree].abs() < 1e-12 {
        degree -= 1;
    }
    match degree {
        0 => Vec::new(),
        1 => vec![-c[0] / c[1]],
        2 => {
            let (a, b, c0) = (c[2], c[1], c[0]);
            let disc = b * b - 4.0 * a * c0;
            if disc < 0.0 {
                Vec::new()
            } else {
                let sq = disc.sqrt();
                vec![(-b + sq) / (2.0 * a), (-b - sq) / (2.0 * a)]
            }
        }
        d => {
            let lead = c[d];
            let mut comp = DMatrix::<f64>::zeros(d, d);
            for i in 0..d {
                comp[(0, i)] = -c[d - 1 - i] / lead;
            }
            for i in 1..d {
                comp[(i, i - 1)] = 1.0;
            }
            let eig = comp.complex_eigenvalues();
            eig.iter()
                .filter(|z| z.im.abs() < 1e-7 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    }
}

/// Rigid 3D-3D alignment `camera ≈ R * world + t` (Kabsch).
fn align_points(world: &[Point3<f64>], camera: &[Vector3<f64>]) -> Option<RigidTransform> {
    let n = world.len() as f64;
    let cw = world.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cc = camera.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (pw, pc) in world.iter().zip(camera) {
        h += (pc - cc) * (pw.coords - cw).transpose();
    }
    let r = project_to_so3(&h);
    let t = cc - r * cw;
    Some(RigidTransform::from_parts_projected(r, t))
}

/// P3P by Grunert's depth formulation. Returns up to four candidate poses
/// mapping world points into the camera frame.
fn p3p(world: &[Point3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<RigidTransform> {
    let a = (world[1] - world[2]).norm();
    let b = (world[0] - world[2]).norm();
    let c = (world[0] - world[1]).norm();
    let scale = a.max(b).max(c);
    if scale < 1e-12 || a < 1e-9 * scale || b < 1e-9 * scale || c < 1e-9 * scale {
        return Vec::new();
    }
    // collinearity check
    let cross = (world[1] - world[0]).cross(&(world[2] - world[0])).norm();
    if cross < 1e-9 * scale * scale {
        return Vec::new();
    }

    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_g = bearings[0].dot(&bearings[1]);

    let big_a = (a * a) / (b * b);
    let big_b = (c * c) / (b * b);

    // u = N(v) / D(v) with N quadratic and D linear in v; substituting into
    // 1 + u^2 - 2 u cos_g = B (1 + v^2 - 2 v cos_b) gives a quartic in v.
    // N(v) = (A-B-1) v^2 - 2 (A-B) cos_b v + (A-B+1)
    // D(v) = 2 (cos_g - v cos_a)
    let n2 = big_a - big_b - 1.0;
    let n1 = -2.0 * (big_a - big_b) * cos_b;
    let n0 = big_a - big_b + 1.0;
    let d1 = -2.0 * cos_a;
    let d0 = 2.0 * cos_g;

    // Q(v) = D^2 + N^2 - 2 N D cos_g - B (1 + v^2 - 2 v cos_b) D^2 = 0
    let dd = [d0 * d0, 2.0 * d0 * d1, d1 * d1, 0.0, 0.0];
    let nn = [
        n0 * n0,
        2.0 * n0 * n1,
        n1 * n1 + 2.0 * n0 * n2,
        2.0 * n1 * n2,
        n2 * n2,
    ];
    let nd = [
        n0 * d0,
        n0 * d1 + n1 * d0,
        n1 * d1 + n2 * d0,
        n2 * d1,
        0.0,
    ];
    // w(v) = 1 - 2 cos_b v + v^2
    let w = [1.0, -2.0 * cos_b, 1.0];
    let mut wdd = [0.0f64; 5];
    for (i, wi) in w.iter().enumerate() {
        for (j, dj) in dd.iter().enumerate().take(3) {
            if i + j < 5 {
                wdd[i + j] += wi * dj;
            }
        }
    }
    let mut q = [0.0f64; 5];
    for i in 0..5 {
        q[i] = dd[i] + nn[i] - 2.0 * cos_g * nd[i] - big_b * wdd[i];
    }

    let mut poses = Vec::new();
    for v in real_roots(q) {
        if !v.is_finite() || v <= 0.0 {
            continue;
        }
        let den = d0 + d1 * v;
        if den.abs() < 1e-12 {
            continue;
        }
        let u = (n2 * v * v + n1 * v + n0) / den;
        if !u.is_finite() || u <= 0.0 {
            continue;
        }
        let s1_sq = (c * c) / (1.0 + u * u - 2.0 * u * cos_g);
        if !(s1_sq.is_finite() && s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let s2 = u * s1;
        let s3 = v * s1;
        let cam_pts = [bearings[0] * s1, bearings[1] * s2, bearings[2] * s3];
        // keep only roots that actually reproduce the triangle
        let err = ((cam_pts[1] - cam_pts[2]).norm() - a).abs()
            + ((cam_pts[0] - cam_pts[2]).norm() - b).abs()
            + ((cam_pts[0] - cam_pts[1]).norm() - c).abs();
        if err > 1e-4 * scale {
            continue;
        }
        if let Some(pose) = align_points(world.as_slice(), &cam_pts) {
            poses.push(pose);
        }
    }
    poses
}

/// Minimal 4-correspondence solver: P3P on the first three points,
/// disambiguated by the fourth's reprojection, cheirality-filtered down to
/// at most one candidate. Degenerate samples yield an empty list.
pub fn solve_pnp_minimal(
    sample: &[(Point3<f64>, Vector2<f64>); 4],
    camera: &CameraModel,
) -> Vec<RigidTransform> {
    let world = [sample[0].0, sample[1].0, sample[2].0];
    let bearings = [
        camera.unproject(&sample[0].1),
        camera.unproject(&sample[1].1),
        camera.unproject(&sample[2].1),
    ];
    let mut best: Option<(f64, RigidTransform)> = None;
    'cand: for pose in p3p(&world, &bearings) {
        // cheirality on all four sample points
        for (pw, _) in sample.iter() {
            if pose.apply(pw).z <= 0.0 {
                continue 'cand;
            }
        }
        let p4 = pose.apply(&sample[3].0);
        let Ok(px) = camera.project_camera_point(&p4) else {
            continue;
        };
        let err = (px - sample[3].1).norm();
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| vec![p]).unwrap_or_default()
}

fn residual_px(
    pose: &RigidTransform,
    camera: &CameraModel,
    pw: &Point3<f64>,
    px: &Vector2<f64>,
) -> f64 {
    match camera.project_camera_point(&pose.apply(pw)) {
        Ok(proj) => (proj - px).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// RANSAC over [`solve_pnp_minimal`] scored by reprojection-inlier count,
/// with the winner refined by Gauss-Newton over its inliers. Deterministic
/// for a fixed `rng_seed`.
pub fn solve_pnp_ransac(prob: &PnpProblem, cfg: &RansacConfig) -> Result<PnpSolution, PnpError> {
    let n = prob.len();
    let needed = cfg.min_inliers.max(4);
    if n < needed {
        return Err(PnpError::NotEnoughPoints { need: needed, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut indices: Vec<usize> = (0..n).collect();

    let mut best: Option<(usize, f64, RigidTransform, Vec<bool>)> = None;
    let mut iter_cap = cfg.max_iters;
    let mut it = 0;
    while it < iter_cap {
        it += 1;
        indices.shuffle(&mut rng);
        let sample = [
            (prob.points3d[indices[0]], prob.points2d[indices[0]]),
            (prob.points3d[indices[1]], prob.points2d[indices[1]]),
            (prob.points3d[indices[2]], prob.points2d[indices[2]]),
            (prob.points3d[indices[3]], prob.points2d[indices[3]]),
        ];
        for pose in solve_pnp_minimal(&sample, &prob.camera) {
            let mut mask = vec![false; n];
            let mut count = 0usize;
            let mut sq = 0.0;
            for i in 0..n {
                let r = residual_px(&pose, &prob.camera, &prob.points3d[i], &prob.points2d[i]);
                if r <= cfg.inlier_threshold {
                    mask[i] = true;
                    count += 1;
                    sq += r * r;
                }
            }
            if count == 0 {
                continue;
            }
            let rms = (sq / count as f64).sqrt();
            let better = match &best {
                None => true,
                Some((bc, brms, _, _)) => count > *bc || (count == *bc && rms < *brms),
            };
            if better {
                best = Some((count, rms, pose, mask));
                // adaptive iteration cap from the inlier ratio
                let w = count as f64 / n as f64;
                let denom = (1.0 - w.powi(4)).max(1e-12).ln();
                if denom < 0.0 {
                    let need = ((1.0 - cfg.confidence).ln() / denom).ceil();
                    iter_cap = iter_cap.min((need.max(1.0)) as usize).max(it);
                }
            }
        }
    }

    let Some((count, _, pose, mask)) = best else {
        return Err(PnpError::NoConsensus {
            best_seen: 0,
            needed,
        });
    };
    if count < needed {
        return Err(PnpError::NoConsensus {
            best_seen: count,
            needed,
        });
    }

    let refined = refine_pose(&pose, prob, &mask);
    // re-evaluate membership against the refined pose; keep the consensus
    // mask if the refined one would drop under the floor
    let mut new_mask = vec![false; n];
    let mut new_count = 0;
    for i in 0..n {
        let r = residual_px(&refined, &prob.camera, &prob.points3d[i], &prob.points2d[i]);
        if r <= cfg.inlier_threshold {
            new_mask[i] = true;
            new_count += 1;
        }
    }
    let (final_pose, final_mask) = if new_count >= needed {
        (refined, new_mask)
    } else {
        (refine_pose(&pose, prob, &mask), mask)
    };
    let rms = reprojection_rms(&final_pose, prob, &final_mask)?;
    Ok(PnpSolution {
        pose: final_pose,
        inlier_mask: final_mask,
        rms_reproj: rms,
    })
}

/// Root-mean-square pixel reprojection error over the masked
/// correspondences.
pub fn reprojection_rms(
    pose: &RigidTransform,
    prob: &PnpProblem,
    mask: &[bool],
) -> Result<f64, PnpError> {
    let mut sq = 0.0;
    let mut count = 0usize;
    for i in 0..prob.len() {
        if !mask.get(i).copied().unwrap_or(false) {
            continue;
        }
        let r = residual_px(pose, &prob.camera, &prob.points3d[i], &prob.points2d[i]);
        let r = if r.is_finite() { r } else { 1e6 };
        sq += r * r;
        count += 1;
    }
    if count == 0 {
        return Err(PnpError::EmptyMask);
    }
    Ok((sq / count as f64).sqrt())
}

/// Gauss-Newton minimization of the masked reprojection error over the pose,
/// with step halving so the error never increases. At most 20 iterations,
/// convergence at step norm < 1e-8.
fn refine_pose(pose: &RigidTransform, prob: &PnpProblem, mask: &[bool]) -> RigidTransform {
    let idx: Vec<usize> = (0..prob.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return pose.clone();
    }
    let cam = &prob.camera;
    let sse = |p: &RigidTransform| -> f64 {
        idx.iter()
            .map(|&i| {
                let r = residual_px(p, cam, &prob.points3d[i], &prob.points2d[i]);
                if r.is_finite() {
                    r * r
                } else {
                    1e12
                }
            })
            .sum()
    };
    let mut current = pose.clone();
    let mut current_sse = sse(&current);
    for _ in 0..20 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in &idx {
            let xc = current.apply(&prob.points3d[i]);
            if xc.z <= 1e-9 {
                continue;
            }
            let proj = Vector2::new(
                cam.fx * xc.x / xc.z + cam.cx,
                cam.fy * xc.y / xc.z + cam.cy,
            );
            let r = proj - prob.points2d[i];
            let inv_z = 1.0 / xc.z;
            // d(pixel)/d(camera point)
            let dp = nalgebra::Matrix2x3::new(
                cam.fx * inv_z,
                0.0,
                -cam.fx * xc.x * inv_z * inv_z,
                0.0,
                cam.fy * inv_z,
                -cam.fy * xc.y * inv_z * inv_z,
            );
            // camera point wrt (rotation perturbation, translation)
            let rx = xc.coords - current.translation();
            let dxc = {
                let mut m = nalgebra::Matrix3x6::zeros();
                m.fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&(-crate::geometry::skew(&rx)));
                m.fixed_view_mut::<3, 3>(0, 3)
                    .copy_from(&Matrix3::identity());
                m
            };
            let j = dp * dxc;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(delta) = jtj.cholesky().map(|ch| ch.solve(&(-jtr))) else {
            break;
        };
        if delta.norm() < 1e-8 {
            break;
        }
        // step halving keeps the refinement monotone
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let d = delta * scale;
            let omega = Vector3::new(d[0], d[1], d[2]);
            let rot = nalgebra::Rotation3::from_scaled_axis(omega).into_inner();
            let candidate = RigidTransform::from_parts_projected(
                rot * current.rotation(),
                current.translation() + Vector3::new(d[3], d[4], d[5]),
            );
            let c_sse = sse(&candidate);
            if c_sse < current_sse {
                current = candidate;
                current_sse = c_sse;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    current
}
