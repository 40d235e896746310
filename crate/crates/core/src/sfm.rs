//! Two-view structure from motion: normalized 8-point fundamental matrix
//! with RANSAC, essential matrix, cheirality pose recovery, linear
//! triangulation, and joint pose+point reprojection refinement.
//!
//! The recovered relative pose maps first-view points into the second view,
//! `x2 = R x1 + t`, with `t` scaled to unit norm (scene scale is
//! unobservable from two views).

use crate::geometry::{
    project, project_to_so3, skew, CameraModel, GeometryError, RigidTransform,
};
use crate::pnp::RansacConfig;
use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("need at least {need} matches, got {got}")]
    NotEnoughMatches { need: usize, got: usize },
    #[error("no consensus: best model had {best_seen} inliers, needed {needed}")]
    NoConsensus { best_seen: usize, needed: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("cheirality is ambiguous: best {best} vs runner-up {runner_up} votes")]
    AmbiguousCheirality { best: usize, runner_up: usize },
    #[error("no decomposition places points in front of both cameras")]
    AllBehind,
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SfmError>,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A pair of matched pixel observations (first view, second view).
pub type Match = (Vector2<f64>, Vector2<f64>);

/// Output of the two-view epipolar estimation chain.
#[derive(Debug, Clone)]
pub struct TwoViewGeometry {
    /// Fundamental matrix, rank 2, Frobenius norm 1: `x2' F x1 = 0`.
    pub fundamental: Matrix3<f64>,
    /// Essential matrix with equal nonzero singular values.
    pub essential: Matrix3<f64>,
    /// Second-view-from-first-view pose, unit-norm translation.
    pub relative_pose: RigidTransform,
    pub inlier_mask: Vec<bool>,
}

/// Hartley normalization: translate to the centroid and scale so the mean
/// distance from it is sqrt(2).
fn normalize_points(pts: &[Vector2<f64>]) -> (Vec<Vector3<f64>>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 {
        (2.0f64).sqrt() / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0);
    let normed = pts
        .iter()
        .map(|p| Vector3::new(s * (p.x - mean.x), s * (p.y - mean.y), 1.0))
        .collect();
    (normed, t)
}

/// Hartley-normalized 8-point solve on a subset of matches; `None` when the
/// design matrix is rank-deficient (every solution family corresponds to a
/// homography-consistent configuration: planar scene or pure rotation).
fn eight_point(matches: &[Match], idx: &[usize]) -> Result<Option<Matrix3<f64>>, SfmError> {
    let p1: Vec<Vector2<f64>> = idx.iter().map(|&i| matches[i].0).collect();
    let p2: Vec<Vector2<f64>> = idx.iter().map(|&i| matches[i].1).collect();
    let (n1, t1) = normalize_points(&p1);
    let (n2, t2) = normalize_points(&p2);
    let rows = idx.len();
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..rows {
        let x1 = n1[i];
        let x2 = n2[i];
        a[(i, 0)] = x2.x * x1.x;
        a[(i, 1)] = x2.x * x1.y;
        a[(i, 2)] = x2.x;
        a[(i, 3)] = x2.y * x1.x;
        a[(i, 4)] = x2.y * x1.y;
        a[(i, 5)] = x2.y;
        a[(i, 6)] = x1.x;
        a[(i, 7)] = x1.y;
        a[(i, 8)] = 1.0;
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    let smax = sv[0].max(1e-300);
    let s8 = if sv.len() >= 8 { sv[7] } else { 0.0 };
    if s8 / smax < 1e-8 {
        return Ok(None);
    }
    let v_t = svd
        .v_t
        .ok_or_else(|| SfmError::Degenerate("SVD failed in 8-point solve".into()))?;
    let f_vec = v_t.row(v_t.nrows() - 1);
    let f_norm = Matrix3::new(
        f_vec[0], f_vec[1], f_vec[2], f_vec[3], f_vec[4], f_vec[5], f_vec[6], f_vec[7], f_vec[8],
    );
    // rank-2 projection by zeroing the smallest singular value
    let svd3 = f_norm.svd(true, true);
    let u = svd3.u.expect("3x3 SVD");
    let v_t3 = svd3.v_t.expect("3x3 SVD");
    let d = Matrix3::from_diagonal(&Vector3::new(
        svd3.singular_values[0],
        svd3.singular_values[1],
        0.0,
    ));
    let f_rank2 = u * d * v_t3;
    // denormalize and fix the gauge
    let mut f = t2.transpose() * f_rank2 * t1;
    let norm = f.norm();
    if norm < 1e-15 {
        return Ok(None);
    }
    f /= norm;
    // deterministic sign: largest-magnitude entry positive
    let mut max_abs = 0.0;
    let mut sign = 1.0;
    for v in f.iter() {
        if v.abs() > max_abs {
            max_abs = v.abs();
            sign = if *v < 0.0 { -1.0 } else { 1.0 };
        }
    }
    Ok(Some(f * sign))
}

/// First-order geometric (Sampson) distance of a match to `F`.
pub fn sampson_distance(f: &Matrix3<f64>, m: &Match) -> f64 {
    let x1 = Vector3::new(m.0.x, m.0.y, 1.0);
    let x2 = Vector3::new(m.1.x, m.1.y, 1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let e = x2.dot(&fx1);
    let denom = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if denom < 1e-15 {
        return f64::INFINITY;
    }
    (e * e / denom).sqrt()
}

/// Normalized 8-point fundamental-matrix estimation inside RANSAC with
/// Sampson-distance inlier scoring; the winner is re-fit on its inliers.
/// Deterministic under `cfg.rng_seed`.
pub fn estimate_fundamental(
    matches: &[Match],
    cfg: &RansacConfig,
) -> Result<(Matrix3<f64>, Vec<bool>), SfmError> {
    let n = matches.len();
    if n < 8 {
        return Err(SfmError::NotEnoughMatches { need: 8, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let needed = cfg.min_inliers.max(8);

    let mut best: Option<(usize, f64, Matrix3<f64>, Vec<bool>)> = None;
    let mut iter_cap = cfg.max_iters;
    let mut it = 0;
    let mut degenerate_samples = 0usize;
    while it < iter_cap {
        it += 1;
        indices.shuffle(&mut rng);
        let sample: Vec<usize> = indices[..8].to_vec();
        let Some(f) = eight_point(matches, &sample)? else {
            degenerate_samples += 1;
            continue;
        };
        let mut mask = vec![false; n];
        let mut count = 0;
        let mut sq = 0.0;
        for (i, m) in matches.iter().enumerate() {
            let d = sampson_distance(&f, m);
            if d <= cfg.inlier_threshold {
                mask[i] = true;
                count += 1;
                sq += d * d;
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
            best = Some((count, rms, f, mask));
            let w = count as f64 / n as f64;
            let denom = (1.0 - w.powi(8)).max(1e-12).ln();
            if denom < 0.0 {
                let need = ((1.0 - cfg.confidence).ln() / denom).ceil();
                iter_cap = iter_cap.min(need.max(1.0) as usize).max(it);
            }
        }
    }

    // every sample rank-deficient: homography-consistent configuration
    if best.is_none() && degenerate_samples == it {
        return Err(SfmError::Degenerate(
            "all matches consistent with a homography (planar scene or pure rotation)".into(),
        ));
    }
    let Some((count, _, _, mask)) = best else {
        return Err(SfmError::NoConsensus {
            best_seen: 0,
            needed,
        });
    };
    if count < needed {
        return Err(SfmError::NoConsensus {
            best_seen: count,
            needed,
        });
    }
    // re-fit on all inliers; a deficient full solve flags the degeneracy
    let inlier_idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let f = match eight_point(matches, &inlier_idx)? {
        Some(f) => f,
        None => {
            return Err(SfmError::Degenerate(
                "inlier set consistent with a homography (planar scene or pure rotation)".into(),
            ))
        }
    };
    let mut final_mask = vec![false; n];
    for (i, m) in matches.iter().enumerate() {
        final_mask[i] = sampson_distance(&f, m) <= cfg.inlier_threshold;
    }
    if final_mask.iter().filter(|&&b| b).count() < needed {
        return Ok((f, mask));
    }
    Ok((f, final_mask))
}

/// `E = K2' F K1`, projected so its two nonzero singular values are equal,
/// normalized to unit Frobenius norm.
pub fn essential_from_fundamental(
    f: &Matrix3<f64>,
    cam1: &CameraModel,
    cam2: &CameraModel,
) -> Matrix3<f64> {
    let e = cam2.k_matrix().transpose() * f * cam1.k_matrix();
    let svd = e.svd(true, true);
    let u = svd.u.expect("3x3 SVD");
    let v_t = svd.v_t.expect("3x3 SVD");
    let s = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    let mut e = u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * v_t;
    let norm = e.norm();
    if norm > 1e-15 {
        e /= norm;
    }
    e
}

/// The four (R, t) decompositions of an essential matrix, `t` unit-norm.
fn decompose_essential(e: &Matrix3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let mut u = svd.u.expect("3x3 SVD");
    let mut v_t = svd.v_t.expect("3x3 SVD");
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = project_to_so3(&(u * w * v_t));
    let r2 = project_to_so3(&(u * w.transpose() * v_t));
    let t = u.column(2).normalize();
    vec![(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Depths of a normalized-coordinate match triangulated under `[I|0]`,
/// `[R|t]`; returns (z1, z2).
fn triangulate_depths(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
) -> Option<(f64, f64)> {
    let mut a = DMatrix::<f64>::zeros(4, 4);
    // P1 = [I | 0]
    a[(0, 0)] = -1.0;
    a[(0, 2)] = x1.x;
    a[(1, 1)] = -1.0;
    a[(1, 2)] = x1.y;
    // P2 = [R | t]
    for c in 0..3 {
        a[(2, c)] = x2.x * r[(2, c)] - r[(0, c)];
        a[(3, c)] = x2.y * r[(2, c)] - r[(1, c)];
    }
    a[(2, 3)] = x2.x * t.z - t.x;
    a[(3, 3)] = x2.y * t.z - t.y;
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let h = v_t.row(3);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let p = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    let z2 = (r * p + t).z;
    Some((p.z, z2))
}

/// Select the decomposition placing the most matches in front of both
/// cameras. A runner-up with at least 90% of the winner's votes is an
/// ambiguity error.
pub fn recover_pose(
    e: &Matrix3<f64>,
    matches: &[Match],
    cam1: &CameraModel,
    cam2: &CameraModel,
) -> Result<RigidTransform, SfmError> {
    if matches.is_empty() {
        return Err(SfmError::NotEnoughMatches { need: 1, got: 0 });
    }
    if e.norm() < 1e-12 {
        return Err(SfmError::Degenerate("zero essential matrix".into()));
    }
    let mut votes = Vec::new();
    for (r, t) in decompose_essential(e) {
        let mut count = 0;
        for (p1, p2) in matches {
            let x1 = cam1.normalized(p1);
            let x2 = cam2.normalized(p2);
            if let Some((z1, z2)) = triangulate_depths(&r, &t, &x1, &x2) {
                if z1 > 0.0 && z2 > 0.0 {
                    count += 1;
                }
            }
        }
        votes.push((count, r, t));
    }
    votes.sort_by(|a, b| b.0.cmp(&a.0));
    let (best, r, t) = (votes[0].0, votes[0].1, votes[0].2);
    if best == 0 {
        return Err(SfmError::AllBehind);
    }
    let runner_up = votes[1].0;
    if (runner_up as f64) >= 0.9 * best as f64 {
        return Err(SfmError::AmbiguousCheirality { best, runner_up });
    }
    Ok(RigidTransform::from_parts_projected(r, t))
}

/// A reconstructed two-view scene.
#[derive(Debug, Clone)]
pub struct TwoViewReconstruction {
    pub geometry: TwoViewGeometry,
    /// Triangulated inlier points in the first camera's frame.
    pub points: Vec<Point3<f64>>,
    /// Indices into the original match list, parallel to `points`.
    pub inlier_indices: Vec<usize>,
    pub rms_before_px: f64,
    pub rms_after_px: f64,
}

/// Full two-view chain: fundamental via RANSAC, essential, cheirality pose,
/// linear triangulation, then joint Gauss-Newton over pose and points.
pub fn reconstruct_two_view(
    matches: &[Match],
    cam1: &CameraModel,
    cam2: &CameraModel,
    cfg: &RansacConfig,
) -> Result<TwoViewReconstruction, SfmError> {
    let stage = |stage: &'static str| {
        move |e: SfmError| SfmError::Stage {
            stage,
            source: Box::new(e),
        }
    };
    if matches.len() < 8 {
        return Err(SfmError::NotEnoughMatches {
            need: 8,
            got: matches.len(),
        });
    }
    let (f, mask) = estimate_fundamental(matches, cfg).map_err(stage("fundamental"))?;
    let e = essential_from_fundamental(&f, cam1, cam2);
    let inliers: Vec<Match> = matches
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| *m)
        .collect();
    let pose = recover_pose(&e, &inliers, cam1, cam2).map_err(stage("recover_pose"))?;

    // triangulate every inlier; drop matches behind either camera
    let mut points = Vec::new();
    let mut kept_indices = Vec::new();
    for (i, m) in matches.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let x1 = cam1.normalized(&m.0);
        let x2 = cam2.normalized(&m.1);
        let Some((z1, z2)) = triangulate_depths(pose.rotation(), pose.translation(), &x1, &x2)
        else {
            continue;
        };
        if z1 <= 0.0 || z2 <= 0.0 {
            continue;
        }
        points.push(Point3::new(x1.x * z1, x1.y * z1, z1));
        kept_indices.push(i);
    }
    if points.len() < 8 {
        return Err(SfmError::Stage {
            stage: "triangulation",
            source: Box::new(SfmError::NotEnoughMatches {
                need: 8,
                got: points.len(),
            }),
        });
    }

    let kept_matches: Vec<Match> = kept_indices.iter().map(|&i| matches[i]).collect();
    let rms_before = reprojection_rms_two_view(&pose, &points, &kept_matches, cam1, cam2);
    let (pose, points, rms_after) =
        joint_refine(pose, points, &kept_matches, cam1, cam2, rms_before);

    // gauge: unit-norm translation
    let t_norm = pose.translation().norm();
    let (pose, points) = if t_norm > 1e-12 {
        let scaled =
            RigidTransform::from_parts_projected(*pose.rotation(), pose.translation() / t_norm);
        let pts = points
            .into_iter()
            .map(|p| Point3::from(p.coords / t_norm))
            .collect();
        (scaled, pts)
    } else {
        (pose, points)
    };

    let mut inlier_mask = vec![false; matches.len()];
    for &i in &kept_indices {
        inlier_mask[i] = true;
    }
    Ok(TwoViewReconstruction {
        geometry: TwoViewGeometry {
            fundamental: f,
            essential: e,
            relative_pose: pose,
            inlier_mask,
        },
        points,
        inlier_indices: kept_indices,
        rms_before_px: rms_before,
        rms_after_px: rms_after,
    })
}

fn reprojection_rms_two_view(
    pose: &RigidTransform,
    points: &[Point3<f64>],
    matches: &[Match],
    cam1: &CameraModel,
    cam2: &CameraModel,
) -> f64 {
    let mut sq = 0.0;
    let mut count = 0;
    let ident = RigidTransform::identity();
    for (p, m) in points.iter().zip(matches) {
        if let Ok(px) = project(cam1, &ident, p) {
            sq += (px - m.0).norm_squared();
            count += 1;
        }
        if let Ok(px) = project(cam2, pose, p) {
            sq += (px - m.1).norm_squared();
            count += 1;
        }
    }
    if count == 0 {
        return f64::INFINITY;
    }
    (sq / count as f64).sqrt()
}

/// Joint Gauss-Newton over the second-view pose and all points, minimizing
/// pixel reprojection in both views. Step halving keeps the error
/// non-increasing; at most 20 iterations.
fn joint_refine(
    pose: RigidTransform,
    points: Vec<Point3<f64>>,
    matches: &[Match],
    cam1: &CameraModel,
    cam2: &CameraModel,
    rms0: f64,
) -> (RigidTransform, Vec<Point3<f64>>, f64) {
    let n = points.len();
    let params = 6 + 3 * n;
    let mut pose = pose;
    let mut points = points;
    let mut best_rms = rms0;

    for _ in 0..20 {
        let mut jtj = DMatrix::<f64>::zeros(params, params);
        let mut jtr = DVector::<f64>::zeros(params);
        for (k, (p, m)) in points.iter().zip(matches).enumerate() {
            let col = 6 + 3 * k;
            // view 1: residual depends only on the point
            if p.z > 1e-9 {
                let inv = 1.0 / p.z;
                let proj = Vector2::new(cam1.fx * p.x * inv + cam1.cx, cam1.fy * p.y * inv + cam1.cy);
                let r = proj - m.0;
                let dp = nalgebra::Matrix2x3::new(
                    cam1.fx * inv,
                    0.0,
                    -cam1.fx * p.x * inv * inv,
                    0.0,
                    cam1.fy * inv,
                    -cam1.fy * p.y * inv * inv,
                );
                accumulate(&mut jtj, &mut jtr, &dp, &r, None, col);
            }
            // view 2: residual depends on pose and point
            let xc = pose.apply(p);
            if xc.z > 1e-9 {
                let inv = 1.0 / xc.z;
                let proj =
                    Vector2::new(cam2.fx * xc.x * inv + cam2.cx, cam2.fy * xc.y * inv + cam2.cy);
                let r = proj - m.1;
                let dp = nalgebra::Matrix2x3::new(
                    cam2.fx * inv,
                    0.0,
                    -cam2.fx * xc.x * inv * inv,
                    0.0,
                    cam2.fy * inv,
                    -cam2.fy * xc.y * inv * inv,
                );
                let rx = xc.coords - pose.translation();
                let mut dpose = nalgebra::Matrix3x6::zeros();
                dpose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
                dpose
                    .fixed_view_mut::<3, 3>(0, 3)
                    .copy_from(&Matrix3::identity());
                let jpose = dp * dpose;
                let jpoint = dp * pose.rotation();
                accumulate(&mut jtj, &mut jtr, &jpoint, &r, Some(&jpose), col);
            }
        }
        // light Levenberg damping stabilizes the gauge directions
        for d in 0..params {
            jtj[(d, d)] += 1e-9 * (1.0 + jtj[(d, d)]);
        }
        let Some(chol) = jtj.cholesky() else {
            break;
        };
        let delta = chol.solve(&(-jtr.clone()));
        if delta.norm() < 1e-10 {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let omega = Vector3::new(delta[0], delta[1], delta[2]) * scale;
            let rot = nalgebra::Rotation3::from_scaled_axis(omega).into_inner();
            let cand_pose = RigidTransform::from_parts_projected(
                rot * pose.rotation(),
                pose.translation() + Vector3::new(delta[3], delta[4], delta[5]) * scale,
            );
            let cand_points: Vec<Point3<f64>> = points
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    Point3::new(
                        p.x + delta[6 + 3 * k] * scale,
                        p.y + delta[6 + 3 * k + 1] * scale,
                        p.z + delta[6 + 3 * k + 2] * scale,
                    )
                })
                .collect();
            let rms = reprojection_rms_two_view(&cand_pose, &cand_points, matches, cam1, cam2);
            if rms < best_rms {
                pose = cand_pose;
                points = cand_points;
                best_rms = rms;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (pose, points, best_rms)
}

fn accumulate(
    jtj: &mut DMatrix<f64>,
    jtr: &mut DVector<f64>,
    jpoint: &nalgebra::Matrix2x3<f64>,
    r: &Vector2<f64>,
    jpose: Option<&nalgebra::Matrix2x6<f64>>,
    point_col: usize,
) {
    let pp = jpoint.transpose() * jpoint;
    for a in 0..3 {
        for b in 0..3 {
            jtj[(point_col + a, point_col + b)] += pp[(a, b)];
        }
    }
    let pr = jpoint.transpose() * r;
    for a in 0..3 {
        jtr[point_col + a] += pr[a];
    }
    if let Some(jp) = jpose {
        let ss = jp.transpose() * jp;
        for a in 0..6 {
            for b in 0..6 {
                jtj[(a, b)] += ss[(a, b)];
            }
        }
        let sp = jp.transpose() * jpoint;
        for a in 0..6 {
            for b in 0..3 {
                jtj[(a, point_col + b)] += sp[(a, b)];
                jtj[(point_col + b, a)] += sp[(a, b)];
            }
        }
        let sr = jp.transpose() * r;
        for a in 0..6 {
            jtr[a] += sr[a];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cam() -> CameraModel {
        CameraModel::new(480.0, 480.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn true_pose() -> RigidTransform {
        RigidTransform::from_axis_angle(
            Vector3::new(0.1, 1.0, -0.2),
            0.25,
            Vector3::new(0.35, 0.05, 0.1),
        )
    }

    /// Synthetic scene: random points in front of both cameras.
    fn synthetic_matches(
        rng: &mut ChaCha8Rng,
        n: usize,
        pose: &RigidTransform,
    ) -> (Vec<Match>, Vec<Point3<f64>>) {
        let c = cam();
        let ident = RigidTransform::identity();
        let mut matches = Vec::new();
        let mut points = Vec::new();
        while matches.len() < n {
            let p = Point3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(2.0..6.0),
            );
            let (Ok(p1), Ok(p2)) = (project(&c, &ident, &p), project(&c, pose, &p)) else {
                continue;
            };
            let inside = |v: &Vector2<f64>| v.x > 0.0 && v.x < 640.0 && v.y > 0.0 && v.y < 480.0;
            if inside(&p1) && inside(&p2) {
                matches.push((p1, p2));
                points.push(p);
            }
        }
        (matches, points)
    }

    #[test]
    fn exact_matches_give_tiny_sampson_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let pose = true_pose();
        let (matches, _) = synthetic_matches(&mut rng, 30, &pose);
        let cfg = RansacConfig::default();
        let (f, mask) = estimate_fundamental(&matches, &cfg).unwrap();
        assert!(mask.iter().all(|&b| b), "all exact matches are inliers");
        let max_d = matches
            .iter()
            .map(|m| sampson_distance(&f, m))
            .fold(0.0f64, f64::max);
        assert!(max_d < 1e-6, "max sampson distance {max_d}");
        assert!(f.determinant().abs() < 1e-9);
        assert!((f.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seven_matches_is_a_precondition_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(301);
        let (matches, _) = synthetic_matches(&mut rng, 7, &true_pose());
        assert!(matches!(
            estimate_fundamental(&matches, &RansacConfig::default()),
            Err(SfmError::NotEnoughMatches { need: 8, got: 7 })
        ));
    }

    #[test]
    fn planar_scene_under_pure_rotation_is_degenerate() {
        // pure rotation: all matches satisfy a homography exactly
        let c = cam();
        let rot = RigidTransform::from_axis_angle(Vector3::y(), 0.15, Vector3::zeros());
        let ident = RigidTransform::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(302);
        let mut matches = Vec::new();
        while matches.len() < 24 {
            let p = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.8..0.8), 3.0);
            let (Ok(p1), Ok(p2)) = (project(&c, &ident, &p), project(&c, &rot, &p)) else {
                continue;
            };
            let inside = |v: &Vector2<f64>| v.x > 0.0 && v.x < 640.0 && v.y > 0.0 && v.y < 480.0;
            if inside(&p1) && inside(&p2) {
                matches.push((p1, p2));
            }
        }
        let r = estimate_fundamental(&matches, &RansacConfig::default());
        assert!(
            matches!(r, Err(SfmError::Degenerate(_))),
            "expected degeneracy, got {r:?}"
        );
    }

    #[test]
    fn essential_with_identity_intrinsics_is_projected_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let pose = true_pose();
        let (matches, _) = synthetic_matches(&mut rng, 24, &pose);
        let cfg = RansacConfig::default();
        let (f, _) = estimate_fundamental(&matches, &cfg).unwrap();
        let unit = CameraModel::new(1.0, 1.0, 0.0, 0.0, 2, 2).unwrap();
        let e = essential_from_fundamental(&f, &unit, &unit);
        let svd = e.svd(false, false);
        assert!((svd.singular_values[0] - svd.singular_values[1]).abs() < 1e-6);
        assert!(svd.singular_values[2].abs() < 1e-9);
        let cos = (e.transpose() * f).trace() / (e.norm() * f.norm());
        assert!(cos.abs() > 0.99, "E deviates from F: cos {cos}");
    }

    #[test]
    fn essential_matches_ground_truth_cross_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(304);
        let pose = true_pose();
        let (matches, _) = synthetic_matches(&mut rng, 30, &pose);
        let cfg = RansacConfig::default();
        let (f, _) = estimate_fundamental(&matches, &cfg).unwrap();
        let c = cam();
        let e = essential_from_fundamental(&f, &c, &c);
        let mut truth = skew(&pose.translation().normalize()) * pose.rotation();
        truth /= truth.norm();
        let d_plus = (e - truth).norm();
        let d_minus = (e + truth).norm();
        assert!(d_plus.min(d_minus) < 1e-4, "{}", d_plus.min(d_minus));
    }

    #[test]
    fn intrinsics_scaling_conjugates_the_essential_matrix() {
        let f = Matrix3::new(0.0, -1e-3, 0.01, 1.5e-3, 0.0, -0.02, -0.01, 0.02, 1.0);
        let c1 = cam();
        let c2 = CameraModel::new(2.0 * c1.fx, c1.fy, c1.cx, c1.cy, 640, 480).unwrap();
        let e1 = essential_from_fundamental(&f, &c1, &c1);
        let e2 = essential_from_fundamental(&f, &c2, &c2);
        // oracle: conjugate and project manually
        let raw = c2.k_matrix().transpose() * f * c2.k_matrix();
        let svd = raw.svd(true, true);
        let s = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
        let mut want =
            svd.u.unwrap() * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * svd.v_t.unwrap();
        want /= want.norm();
        let d = (e2 - want).norm().min((e2 + want).norm());
        assert!(d < 1e-12);
        assert!((e1 - e2).norm() > 1e-6, "scaling must change E");
    }

    #[test]
    fn recover_pose_matches_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(305);
        let pose = true_pose();
        let (matches, _) = synthetic_matches(&mut rng, 30, &pose);
        let c = cam();
        let mut e = skew(&pose.translation().normalize()) * pose.rotation();
        e /= e.norm();
        let got = recover_pose(&e, &matches, &c, &c).unwrap();
        assert!(got.rotation_angle_to(&pose) < 1e-4);
        let t_angle = got
            .translation()
            .normalize()
            .dot(&pose.translation().normalize())
            .clamp(-1.0, 1.0)
            .acos();
        assert!(t_angle.to_degrees() < 0.1, "translation direction off");
        assert!((got.translation().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recover_pose_with_far_point_still_selects_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(306);
        let pose = true_pose();
        let (mut matches, _) = synthetic_matches(&mut rng, 2, &pose);
        let c = cam();
        let far = Point3::new(0.2, -0.1, 60.0);
        let p1 = project(&c, &RigidTransform::identity(), &far).unwrap();
        let p2 = project(&c, &pose, &far).unwrap();
        matches.push((p1, p2));
        let mut e = skew(&pose.translation().normalize()) * pose.rotation();
        e /= e.norm();
        let got = recover_pose(&e, &matches, &c, &c).unwrap();
        assert!(got.rotation_angle_to(&pose) < 1e-4);
    }

    #[test]
    fn zero_essential_is_an_error() {
        let c = cam();
        let m = vec![(Vector2::new(1.0, 1.0), Vector2::new(2.0, 2.0))];
        assert!(matches!(
            recover_pose(&Matrix3::zeros(), &m, &c, &c),
            Err(SfmError::Degenerate(_))
        ));
    }

    #[test]
    fn exact_reconstruction_refines_to_near_zero_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(307);
        let pose = true_pose();
        let (matches, points) = synthetic_matches(&mut rng, 30, &pose);
        let rec =
            reconstruct_two_view(&matches, &cam(), &cam(), &RansacConfig::default()).unwrap();
        assert_eq!(rec.points.len(), 30);
        assert!(rec.rms_after_px < 1e-8, "rms {}", rec.rms_after_px);
        assert!(rec.rms_after_px <= rec.rms_before_px);
        assert!(rec.geometry.relative_pose.rotation_angle_to(&pose) < 1e-4);
        // reconstructed points match ground truth after undoing the gauge
        let s = pose.translation().norm();
        let max_err = rec
            .points
            .iter()
            .zip(&points)
            .map(|(got, want)| (got.coords * s - want.coords).norm())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-4, "max point error {max_err}");
    }

    #[test]
    fn refinement_lowers_rms_on_noisy_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(308);
        let pose = true_pose();
        let (mut matches, _) = synthetic_matches(&mut rng, 40, &pose);
        for m in matches.iter_mut() {
            m.0 += Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            m.1 += Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        }
        let rec =
            reconstruct_two_view(&matches, &cam(), &cam(), &RansacConfig::default()).unwrap();
        assert!(
            rec.rms_after_px < rec.rms_before_px,
            "{} !< {}",
            rec.rms_after_px,
            rec.rms_before_px
        );
    }

    #[test]
    fn reconstruction_is_deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(309);
        let (matches, _) = synthetic_matches(&mut rng, 25, &true_pose());
        let cfg = RansacConfig {
            rng_seed: 5,
            ..Default::default()
        };
        let a = reconstruct_two_view(&matches, &cam(), &cam(), &cfg).unwrap();
        let b = reconstruct_two_view(&matches, &cam(), &cam(), &cfg).unwrap();
        assert_eq!(a.rms_after_px.to_bits(), b.rms_after_px.to_bits());
        assert_eq!(a.points.len(), b.points.len());
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert_eq!(pa.x.to_bits(), pb.x.to_bits());
        }
    }

    #[test]
    fn epipolar_identity_holds_for_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(310);
        let (matches, _) = synthetic_matches(&mut rng, 30, &true_pose());
        let cfg = RansacConfig::default();
        let (f, mask) = estimate_fundamental(&matches, &cfg).unwrap();
        for (m, &keep) in matches.iter().zip(&mask) {
            if keep {
                assert!(sampson_distance(&f, m) <= cfg.inlier_threshold);
            }
        }
    }
}
