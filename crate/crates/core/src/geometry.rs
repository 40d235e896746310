//! Camera models, rigid transforms, triangulation, and epipolar primitives.
//!
//! Conventions: a [`RigidTransform`] maps points from its source frame into
//! its target frame, `x_target = R x_source + t`. Translations are meters.
//! Pixel coordinates follow the pinhole model `u = fx X/Z + cx`,
//! `v = fy Y/Z + cy` with no lens distortion (inputs are pre-rectified).

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("camera parameters invalid: {0}")]
    BadCamera(String),
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("point at depth {0:.6} is behind the camera")]
    BehindCamera(f64),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("near-parallel rays (angle {angle_rad:.3e} rad)")]
    ParallelRays { angle_rad: f64 },
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadCamera(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if cx < 0.0 || cy < 0.0 || cx > (width as f64) || cy > (height as f64) {
            return Err(GeometryError::BadCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Project a camera-frame point; requires positive depth.
    pub fn project_camera_point(&self, p: &Point3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Unit ray through a pixel, in the camera frame.
    pub fn unproject(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0).normalize()
    }

    /// Normalized image coordinates (x/z, y/z) of a pixel.
    pub fn normalized(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }
}

/// Rotation + translation on SE(3); maps source-frame points to the target
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

pub const ORTHONORMALITY_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and determinant +1 to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_dev = (rotation.determinant() - 1.0).abs();
        if dev >= ORTHONORMALITY_TOL || det_dev >= ORTHONORMALITY_TOL {
            return Err(GeometryError::NotARotation(dev.max(det_dev)));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds from a possibly slightly denormalized rotation by projecting
    /// onto SO(3) via SVD.
    pub fn from_parts_projected(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: project_to_so3(&rotation),
            translation,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        Self::from_quaternion(q, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle between two transforms, radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Serialized pose: unit quaternion (w, x, y, z) + translation in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    /// w, x, y, z
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        let q = t.quaternion();
        let (w, i, j, k) = (q.w, q.i, q.j, q.k);
        // canonical sign: w >= 0
        let s = if w < 0.0 { -1.0 } else { 1.0 };
        PoseRecord {
            rotation: [s * w, s * i, s * j, s * k],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<&PoseRecord> for RigidTransform {
    type Error = GeometryError;

    fn try_from(r: &PoseRecord) -> Result<Self, GeometryError> {
        let [w, x, y, z] = r.rotation;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NotARotation((norm - 1.0).abs()));
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Ok(RigidTransform::from_quaternion(
            q,
            Vector3::new(r.translation[0], r.translation[1], r.translation[2]),
        ))
    }
}

/// A calibrated stereo pair; `right_from_left` maps left-camera points into
/// the right camera frame.
#[derive(Debug, Clone)]
pub struct StereoRig {
    pub left: CameraModel,
    pub right: CameraModel,
    pub right_from_left: RigidTransform,
}

impl StereoRig {
    pub fn new(
        left: CameraModel,
        right: CameraModel,
        right_from_left: RigidTransform,
    ) -> Result<Self, GeometryError> {
        if right_from_left.translation().norm() <= 0.0 {
            return Err(GeometryError::Degenerate("stereo baseline is zero".into()));
        }
        Ok(Self {
            left,
            right,
            right_from_left,
        })
    }

    pub fn baseline(&self) -> f64 {
        self.right_from_left.translation().norm()
    }
}

/// Project a source-frame point through a pose into pixel coordinates.
pub fn project(
    cam: &CameraModel,
    pose: &RigidTransform,
    point: &Point3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    cam.project_camera_point(&pose.apply(point))
}

pub const RAY_ANGLE_TOL: f64 = 1e-9;

/// Midpoint triangulation of a stereo observation, in the left-camera frame.
pub fn triangulate_stereo(
    rig: &StereoRig,
    left_px: &Vector2<f64>,
    right_px: &Vector2<f64>,
) -> Result<Point3<f64>, GeometryError> {
    let left_to_right = &rig.right_from_left;
    let right_to_left = left_to_right.inverse();
    // both rays expressed in the left frame
    let d0 = rig.left.unproject(left_px);
    let d1 = right_to_left.apply_vector(&rig.right.unproject(right_px));
    let o1 = *right_to_left.translation();

    let angle = d0.cross(&d1).norm().atan2(d0.dot(&d1));
    if angle.abs() <= RAY_ANGLE_TOL {
        return Err(GeometryError::ParallelRays { angle_rad: angle });
    }
    // closest points on the two rays: o0 + s d0 and o1 + t d1
    let r = -o1; // o0 - o1 with o0 = origin
    let a = d0.dot(&d0);
    let b = d0.dot(&d1);
    let c = d1.dot(&d1);
    let d = d0.dot(&r);
    let e = d1.dot(&r);
    let denom = a * c - b * b;
    if denom.abs() < 1e-15 {
        return Err(GeometryError::ParallelRays { angle_rad: angle });
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    let p0 = d0 * s;
    let p1 = o1 + d1 * t;
    Ok(Point3::from((p0 + p1) * 0.5))
}

/// Result of a homogeneous DLT triangulation.
#[derive(Debug, Clone)]
pub struct TriangulatedPoint {
    /// Point in the reference frame of the poses (their common source frame).
    pub point: Point3<f64>,
    /// RMS pixel reprojection residual over the contributing views.
    pub rms_px: f64,
}

/// Linear (DLT) triangulation from two or more calibrated views. Each view
/// pairs a camera with the pose mapping reference-frame points into that
/// camera's frame.
pub fn triangulate_linear(
    views: &[(CameraModel, RigidTransform)],
    observations: &[Vector2<f64>],
) -> Result<TriangulatedPoint, GeometryError> {
    if views.len() < 2 || views.len() != observations.len() {
        return Err(GeometryError::Degenerate(format!(
            "need >= 2 paired views, got {} views / {} observations",
            views.len(),
            observations.len()
        )));
    }
    // rows of A x = 0 in normalized camera coordinates
    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (i, ((cam, pose), obs)) in views.iter().zip(observations).enumerate() {
        let n = cam.normalized(obs);
        let r = pose.rotation();
        let t = pose.translation();
        // P = [R | t]; row0 = x * P3 - P1, row1 = y * P3 - P2
        for col in 0..3 {
            a[(2 * i, col)] = n.x * r[(2, col)] - r[(0, col)];
            a[(2 * i + 1, col)] = n.y * r[(2, col)] - r[(1, col)];
        }
        a[(2 * i, 3)] = n.x * t.z - t.x;
        a[(2 * i + 1, 3)] = n.y * t.z - t.y;
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or_else(|| {
        GeometryError::Degenerate("SVD failed in linear triangulation".into())
    })?;
    // rank check: the 4-column system must determine the point up to scale
    let smin = svd.singular_values[svd.singular_values.len() - 1];
    let smax = svd.singular_values[0];
    if smax <= 0.0 || svd.singular_values[2] / smax < 1e-12 {
        return Err(GeometryError::Degenerate(
            "rank-deficient triangulation system".into(),
        ));
    }
    let _ = smin;
    let h = v_t.row(v_t.nrows() - 1);
    if h[3].abs() < 1e-15 {
        return Err(GeometryError::Degenerate(
            "triangulated point at infinity".into(),
        ));
    }
    let point = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    let mut sq = 0.0;
    let mut used = 0usize;
    for ((cam, pose), obs) in views.iter().zip(observations) {
        if let Ok(px) = project(cam, pose, &point) {
            sq += (px - obs).norm_squared();
            used += 1;
        }
    }
    if used == 0 {
        return Err(GeometryError::Degenerate(
            "triangulated point behind every camera".into(),
        ));
    }
    Ok(TriangulatedPoint {
        point,
        rms_px: (sq / used as f64).sqrt(),
    })
}

/// Epipolar line `l = F p` in the second image, normalized so a^2 + b^2 = 1.
pub fn epipolar_line(f: &Matrix3<f64>, p: &Vector2<f64>) -> Result<(f64, f64, f64), GeometryError> {
    let l = f * Vector3::new(p.x, p.y, 1.0);
    let n = (l.x * l.x + l.y * l.y).sqrt();
    if n < 1e-12 {
        return Err(GeometryError::Degenerate(
            "zero epipolar line (point at the epipole?)".into(),
        ));
    }
    Ok((l.x / n, l.y / n, l.z / n))
}

/// Signed distance of a point to a normalized line (a, b, c).
pub fn point_line_distance(line: (f64, f64, f64), p: &Vector2<f64>) -> f64 {
    line.0 * p.x + line.1 * p.y + line.2
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("3x3 SVD");
    let v_t = svd.v_t.expect("3x3 SVD");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::new(400.0, 420.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(-0.5..0.5);
        let t = Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        );
        RigidTransform::from_axis_angle(axis, angle, t)
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let c = cam();
        for depth in [0.5, 2.0, 100.0] {
            let px = project(&c, &RigidTransform::identity(), &Point3::new(0.0, 0.0, depth))
                .unwrap();
            assert!((px.x - c.cx).abs() < 1e-12 && (px.y - c.cy).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_projection() {
        let c = CameraModel::new(100.0, 100.0, 0.0, 0.0, 10, 10).unwrap();
        let px = project(&c, &RigidTransform::identity(), &Point3::new(1.0, 0.0, 2.0)).unwrap();
        assert!((px.x - 50.0).abs() < 1e-12 && (px.y - 0.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let c = cam();
        assert!(matches!(
            project(&c, &RigidTransform::identity(), &Point3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn unproject_project_recovers_ray() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cam();
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(1.5..6.0),
            );
            let Ok(px) = project(&c, &pose, &p) else {
                continue;
            };
            let ray = c.unproject(&px);
            let pc = pose.apply(&p).coords;
            let cos = ray.dot(&pc.normalize());
            assert!(cos > 1.0 - 1e-9, "ray mismatch: cos={cos}");
        }
    }

    #[test]
    fn projective_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = cam();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let p = Point3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(2.0..5.0),
            );
            let s = rng.gen_range(0.5..3.0);
            let scaled_pose = RigidTransform::new(*pose.rotation(), pose.translation() * s).unwrap();
            let scaled_p = Point3::from(p.coords * s);
            let (Ok(a), Ok(b)) = (project(&c, &pose, &p), project(&c, &scaled_pose, &scaled_p))
            else {
                continue;
            };
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let t = random_pose(&mut rng);
            let e = t.compose(&t.inverse());
            assert!((e.rotation() - Matrix3::identity()).abs().max() < 1e-12);
            assert!(e.translation().norm() < 1e-12);
        }
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            assert!((lhs.rotation() - rhs.rotation()).abs().max() < 1e-12);
            assert!((lhs.translation() - rhs.translation()).norm() < 1e-12);
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    fn test_rig() -> StereoRig {
        StereoRig::new(
            cam(),
            cam(),
            RigidTransform::new(Matrix3::identity(), Vector3::new(-0.1, 0.0, 0.0)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn stereo_triangulation_inverts_exact_projections() {
        let rig = test_rig();
        let p = Point3::new(0.0, 0.0, 2.0);
        let pl = project(&rig.left, &RigidTransform::identity(), &p).unwrap();
        let pr = project(&rig.right, &rig.right_from_left, &p).unwrap();
        let rec = triangulate_stereo(&rig, &pl, &pr).unwrap();
        assert!((rec - p).norm() < 1e-9, "err {}", (rec - p).norm());
    }

    #[test]
    fn stereo_depth_error_under_pixel_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let rig = test_rig();
        let p = Point3::new(0.1, -0.05, 2.0);
        let pl = project(&rig.left, &RigidTransform::identity(), &p).unwrap();
        let pr = project(&rig.right, &rig.right_from_left, &p).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let nl = pl + Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let nr = pr + Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let rec = triangulate_stereo(&rig, &nl, &nr).unwrap();
            worst = worst.max((rec.z - p.z).abs() / p.z);
        }
        assert!(worst < 0.05, "depth error {worst}");
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let rig = test_rig();
        let px = Vector2::new(rig.left.cx, rig.left.cy);
        assert!(matches!(
            triangulate_stereo(&rig, &px, &px),
            Err(GeometryError::ParallelRays { .. })
        ));
    }

    #[test]
    fn linear_triangulation_matches_stereo_midpoint() {
        let rig = test_rig();
        let p = Point3::new(0.2, 0.1, 3.0);
        let pl = project(&rig.left, &RigidTransform::identity(), &p).unwrap();
        let pr = project(&rig.right, &rig.right_from_left, &p).unwrap();
        let lin = triangulate_linear(
            &[
                (rig.left, RigidTransform::identity()),
                (rig.right, rig.right_from_left.clone()),
            ],
            &[pl, pr],
        )
        .unwrap();
        let mid = triangulate_stereo(&rig, &pl, &pr).unwrap();
        assert!((lin.point - mid).norm() < 1e-6);
        assert!(lin.rms_px < 1e-9);
    }

    #[test]
    fn three_view_triangulation_recovers_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let c = cam();
        for _ in 0..20 {
            let p = Point3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(2.0..5.0),
            );
            let poses = [
                RigidTransform::identity(),
                RigidTransform::from_axis_angle(
                    Vector3::y(),
                    0.1,
                    Vector3::new(-0.2, 0.0, 0.0),
                ),
                RigidTransform::from_axis_angle(
                    Vector3::x(),
                    -0.05,
                    Vector3::new(0.1, 0.15, 0.0),
                ),
            ];
            let views: Vec<_> = poses.iter().map(|t| (c, t.clone())).collect();
            let obs: Vec<_> = poses.iter().map(|t| project(&c, t, &p).unwrap()).collect();
            let rec = triangulate_linear(&views, &obs).unwrap();
            assert!((rec.point - p).norm() < 1e-8, "err {}", (rec.point - p).norm());
        }
    }

    #[test]
    fn identical_views_are_degenerate() {
        let c = cam();
        let obs = Vector2::new(300.0, 200.0);
        let views = [
            (c, RigidTransform::identity()),
            (c, RigidTransform::identity()),
        ];
        assert!(triangulate_linear(&views, &[obs, obs]).is_err());
    }

    #[test]
    fn epipolar_line_is_normalized() {
        let f = Matrix3::new(0.0, -1e-3, 0.01, 1.5e-3, 0.0, -0.02, -0.01, 0.02, 1.0);
        let (a, b, _c) = epipolar_line(&f, &Vector2::new(120.0, 80.0)).unwrap();
        assert!(((a * a + b * b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_line_is_degenerate() {
        let f = Matrix3::zeros();
        assert!(epipolar_line(&f, &Vector2::new(1.0, 2.0)).is_err());
    }

    #[test]
    fn pose_record_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let t = random_pose(&mut rng);
            let rec = PoseRecord::from(&t);
            let back = RigidTransform::try_from(&rec).unwrap();
            assert!(t.rotation_angle_to(&back) < 1e-12);
            assert!((t.translation() - back.translation()).norm() < 1e-12);
        }
    }
}
