//! Pinhole camera model, world/camera frame transforms, and the 2D input
//! normalization applied before the lifting networks.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{Frame, Pose3D};
use crate::scalar::{real, Real};

/// Calibrated pinhole camera: intrinsics `K` plus extrinsics `(R, t)` such
/// that a world point maps to the camera frame as `X_C = R X_W + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel<T> {
    k: Matrix3<T>,
    r: Matrix3<T>,
    t: Vector3<T>,
    pub name: Option<String>,
}

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("expected a pose in the {expected} frame, got {got}")]
    WrongFrame { expected: Frame, got: Frame },
    #[error("joint {joint} is behind the camera (z = {z})")]
    BehindCamera { joint: usize, z: f64 },
    #[error("normalization reference distance {distance} is degenerate")]
    DegenerateScale { distance: f64 },
    #[error("normalization references joint {index} but only {n_points} points are present")]
    ReferenceJointMissing { index: usize, n_points: usize },
    #[error("invalid intrinsic matrix: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsic rotation: {0}")]
    InvalidExtrinsics(String),
    #[error("confidence {value} at point {index} is outside [0, 1]")]
    ConfidenceOutOfRange { index: usize, value: f64 },
    #[error("point/confidence count mismatch: {points} points, {confidences} confidences")]
    CountMismatch { points: usize, confidences: usize },
}

const ORTHONORMAL_TOL: f64 = 1e-6;

impl<T: Real> CameraModel<T> {
    /// Builds a camera, checking that `K` is upper-triangular with positive
    /// focal lengths and that `R` is a proper rotation.
    pub fn new(k: Matrix3<T>, r: Matrix3<T>, t: Vector3<T>) -> Result<Self, CameraError> {
        let lower = [k[(1, 0)], k[(2, 0)], k[(2, 1)]];
        if lower.iter().any(|v| !v.is_zero()) {
            return Err(CameraError::InvalidIntrinsics(
                "K must be upper-triangular".into(),
            ));
        }
        if !(k[(0, 0)] > T::zero()) || !(k[(1, 1)] > T::zero()) {
            return Err(CameraError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        let tol = real::<T>(ORTHONORMAL_TOL);
        let residual = (r.transpose() * r - Matrix3::identity()).abs().max();
        if residual > tol {
            return Err(CameraError::InvalidExtrinsics(format!(
                "R is not orthonormal (max residual {})",
                residual.to_f64c()
            )));
        }
        if (r.determinant() - T::one()).abs() > tol {
            return Err(CameraError::InvalidExtrinsics("det R != 1".into()));
        }
        Ok(Self { k, r, t, name: None })
    }

    /// Convenience constructor from focal lengths and principal point.
    pub fn from_intrinsics(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        r: Matrix3<T>,
        t: Vector3<T>,
    ) -> Result<Self, CameraError> {
        let mut k = Matrix3::identity();
        k[(0, 0)] = fx;
        k[(1, 1)] = fy;
        k[(0, 2)] = cx;
        k[(1, 2)] = cy;
        Self::new(k, r, t)
    }

    /// Identity camera: `K = R = I`, `t = 0`.
    pub fn identity() -> Self {
        Self {
            k: Matrix3::identity(),
            r: Matrix3::identity(),
            t: Vector3::zeros(),
            name: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn k(&self) -> &Matrix3<T> {
        &self.k
    }

    pub fn r(&self) -> &Matrix3<T> {
        &self.r
    }

    pub fn t(&self) -> &Vector3<T> {
        &self.t
    }
}

/// 2D keypoints with per-point detector confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D<T> {
    points: Vec<Vector2<T>>,
    confidence: Vec<T>,
}

impl<T: Real> Keypoints2D<T> {
    /// Builds keypoints, validating the confidence range.
    pub fn new(points: Vec<Vector2<T>>, confidence: Vec<T>) -> Result<Self, CameraError> {
        if points.len() != confidence.len() {
            return Err(CameraError::CountMismatch {
                points: points.len(),
                confidences: confidence.len(),
            });
        }
        for (index, &c) in confidence.iter().enumerate() {
            if !(c >= T::zero() && c <= T::one()) {
                return Err(CameraError::ConfidenceOutOfRange {
                    index,
                    value: c.to_f64c(),
                });
            }
        }
        Ok(Self { points, confidence })
    }

    /// Builds keypoints without the confidence-range check; lengths must match.
    pub fn from_parts(points: Vec<Vector2<T>>, confidence: Vec<T>) -> Self {
        assert_eq!(points.len(), confidence.len());
        Self { points, confidence }
    }

    /// All confidences set to 1.
    pub fn with_uniform_confidence(points: Vec<Vector2<T>>) -> Self {
        let confidence = vec![T::one(); points.len()];
        Self { points, confidence }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector2<T>] {
        &self.points
    }

    pub fn confidence(&self) -> &[T] {
        &self.confidence
    }
}

/// Transforms a world-frame pose into the camera frame: `X_C = R X_W + t`.
pub fn world_to_camera<T: Real>(
    pose: &Pose3D<T>,
    cam: &CameraModel<T>,
) -> Result<Pose3D<T>, CameraError> {
    if pose.frame != Frame::World {
        return Err(CameraError::WrongFrame {
            expected: Frame::World,
            got: pose.frame,
        });
    }
    let positions = pose
        .positions
        .iter()
        .map(|p| cam.r * p + cam.t)
        .collect();
    Ok(Pose3D {
        frame: Frame::Camera,
        positions,
    })
}

/// Projects a camera-frame pose to pixel coordinates by `X_I ~ K X_C`.
///
/// Every point must be strictly in front of the camera.
pub fn project<T: Real>(
    pose: &Pose3D<T>,
    cam: &CameraModel<T>,
) -> Result<Keypoints2D<T>, CameraError> {
    if pose.frame != Frame::Camera {
        return Err(CameraError::WrongFrame {
            expected: Frame::Camera,
            got: pose.frame,
        });
    }
    let mut points = Vec::with_capacity(pose.positions.len());
    for (joint, p) in pose.positions.iter().enumerate() {
        if !(p.z > T::zero()) {
            return Err(CameraError::BehindCamera {
                joint,
                z: p.z.to_f64c(),
            });
        }
        let h = cam.k * p;
        points.push(Vector2::new(h.x / h.z, h.y / h.z));
    }
    Ok(Keypoints2D::with_uniform_confidence(points))
}

/// Projects one camera-frame point and returns the 2x3 Jacobian
/// `d(u, v) / dX_C` alongside the pixel coordinates.
pub fn project_point_with_jacobian<T: Real>(
    p: &Vector3<T>,
    cam: &CameraModel<T>,
) -> (Vector2<T>, Matrix2x3<T>) {
    let h = cam.k * p;
    let inv_w = T::one() / h.z;
    let u = h.x * inv_w;
    let v = h.y * inv_w;
    let k = &cam.k;
    // Row 3 of K is (0, 0, 1), so dw/dX = e_z.
    let mut jac = Matrix2x3::zeros();
    for c in 0..3 {
        let dw = if c == 2 { T::one() } else { T::zero() };
        jac[(0, c)] = (k[(0, c)] - u * dw) * inv_w;
        jac[(1, c)] = (k[(1, c)] - v * dw) * inv_w;
    }
    (Vector2::new(u, v), jac)
}

/// Which point anchors the normalized frame's origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginRef {
    /// A single reference joint.
    Joint(usize),
    /// Midpoint between two joints (e.g. mid-shoulder).
    Midpoint(usize, usize),
}

/// Configuration of the 2D input normalization: which point becomes the
/// origin and which pair of points defines the unit scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub origin: OriginRef,
    /// Pair of joint indices whose distance becomes 1 after normalization.
    pub scale: (usize, usize),
}

impl NormalizationSpec {
    /// Mid-shoulder origin, shoulder-to-shoulder scale.
    pub fn body_default(left_shoulder: usize, right_shoulder: usize) -> Self {
        Self {
            origin: OriginRef::Midpoint(left_shoulder, right_shoulder),
            scale: (left_shoulder, right_shoulder),
        }
    }

    /// Wrist origin, wrist-to-middle-MCP scale.
    pub fn hand_default(wrist: usize, middle_mcp: usize) -> Self {
        Self {
            origin: OriginRef::Joint(wrist),
            scale: (wrist, middle_mcp),
        }
    }

    fn max_index(&self) -> usize {
        let origin_max = match self.origin {
            OriginRef::Joint(i) => i,
            OriginRef::Midpoint(a, b) => a.max(b),
        };
        origin_max.max(self.scale.0).max(self.scale.1)
    }
}

const DEGENERATE_SCALE: f64 = 1e-6;

/// Normalizes keypoints into a translation/scale invariant flat vector
/// `(x1, y1, x2, y2, ...)`.
///
/// The reference origin moves to `(0, 0)` and coordinates are divided by the
/// reference distance. Zero-confidence points are zeroed out so missing
/// detections keep the input width fixed.
pub fn normalize_keypoints<T: Real>(
    kp: &Keypoints2D<T>,
    spec: &NormalizationSpec,
) -> Result<Vec<T>, CameraError> {
    if spec.max_index() >= kp.len() {
        return Err(CameraError::ReferenceJointMissing {
            index: spec.max_index(),
            n_points: kp.len(),
        });
    }
    let pts = kp.points();
    let origin = match spec.origin {
        OriginRef::Joint(i) => pts[i],
        OriginRef::Midpoint(a, b) => (pts[a] + pts[b]) * real::<T>(0.5),
    };
    let distance = (pts[spec.scale.0] - pts[spec.scale.1]).norm();
    if distance < real::<T>(DEGENERATE_SCALE) {
        return Err(CameraError::DegenerateScale {
            distance: distance.to_f64c(),
        });
    }
    let inv = T::one() / distance;
    let mut out = Vec::with_capacity(2 * kp.len());
    for (p, &c) in pts.iter().zip(kp.confidence()) {
        if c.is_zero() {
            out.push(T::zero());
            out.push(T::zero());
        } else {
            out.push((p.x - origin.x) * inv);
            out.push((p.y - origin.y) * inv);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn world_pose(points: Vec<Vector3<f64>>) -> Pose3D<f64> {
        Pose3D {
            frame: Frame::World,
            positions: points,
        }
    }

    fn random_rotation(rng: &mut StdRng) -> Matrix3<f64> {
        // Compose three elementary rotations; always a proper rotation.
        let (a, b, c): (f64, f64, f64) = (
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        nalgebra::Rotation3::from_euler_angles(a, b, c).into_inner()
    }

    #[test]
    fn identity_transform_is_identity() {
        let cam = CameraModel::<f64>::identity();
        let pose = world_pose(vec![Vector3::new(1.0, 2.0, 3.0)]);
        let out = world_to_camera(&pose, &cam).unwrap();
        assert_eq!(out.positions[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(out.frame, Frame::Camera);
    }

    #[test]
    fn pure_translation() {
        let cam =
            CameraModel::new(Matrix3::identity(), Matrix3::identity(), Vector3::new(0.0, 0.0, 10.0))
                .unwrap();
        let out = world_to_camera(&world_pose(vec![Vector3::zeros()]), &cam).unwrap();
        assert_eq!(out.positions[0], Vector3::new(0.0, 0.0, 10.0));
    }

    #[test]
    fn world_to_camera_round_trips_against_algebraic_inverse() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let t = Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            );
            let cam = CameraModel::new(Matrix3::identity(), r, t).unwrap();
            let p = Vector3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            let out = world_to_camera(&world_pose(vec![p]), &cam).unwrap();
            // Independent inverse: X_W = R^T (X_C - t).
            let back = r.transpose() * (out.positions[0] - t);
            assert_relative_eq!(back, p, epsilon = 1e-12);
        }
    }

    #[test]
    fn wrong_frame_rejected() {
        let cam = CameraModel::<f64>::identity();
        let pose = Pose3D {
            frame: Frame::Camera,
            positions: vec![Vector3::zeros()],
        };
        assert!(matches!(
            world_to_camera(&pose, &cam),
            Err(CameraError::WrongFrame { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel::<f64>::identity();
        let pose = Pose3D {
            frame: Frame::Camera,
            positions: vec![Vector3::new(0.0, 0.0, 2.0), Vector3::new(2.0, 4.0, 2.0)],
        };
        let kp = project(&pose, &cam).unwrap();
        assert_eq!(kp.points()[0], Vector2::new(0.0, 0.0));
        assert_eq!(kp.points()[1], Vector2::new(1.0, 2.0));
    }

    #[test]
    fn projection_with_focal_and_principal_point() {
        // Hand evaluation: u = fx*x/z + cx = 1000*0.1 + 500 = 600, v = cy = 500.
        let cam = CameraModel::from_intrinsics(
            1000.0,
            1000.0,
            500.0,
            500.0,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap();
        let pose = Pose3D {
            frame: Frame::Camera,
            positions: vec![Vector3::new(0.1, 0.0, 1.0)],
        };
        let kp = project(&pose, &cam).unwrap();
        assert_relative_eq!(kp.points()[0].x, 600.0, epsilon = 1e-12);
        assert_relative_eq!(kp.points()[0].y, 500.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_reports_joint() {
        let cam = CameraModel::<f64>::identity();
        let pose = Pose3D {
            frame: Frame::Camera,
            positions: vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.0)],
        };
        match project(&pose, &cam) {
            Err(CameraError::BehindCamera { joint, .. }) => assert_eq!(joint, 1),
            other => panic!("expected behind-camera error, got {other:?}"),
        }
    }

    #[test]
    fn projection_scale_covariant_in_fx() {
        let p = Vector3::new(0.3, -0.2, 2.0);
        let base = CameraModel::from_intrinsics(
            800.0, 700.0, 320.0, 240.0, Matrix3::identity(), Vector3::zeros(),
        )
        .unwrap();
        let doubled = CameraModel::from_intrinsics(
            1600.0, 700.0, 320.0, 240.0, Matrix3::identity(), Vector3::zeros(),
        )
        .unwrap();
        let pose = Pose3D { frame: Frame::Camera, positions: vec![p] };
        let a = project(&pose, &base).unwrap().points()[0];
        let b = project(&pose, &doubled).unwrap().points()[0];
        assert_relative_eq!(b.x - 320.0, 2.0 * (a.x - 320.0), epsilon = 1e-12);
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let cam = CameraModel::from_intrinsics(
            900.0, 950.0, 480.0, 270.0, Matrix3::identity(), Vector3::zeros(),
        )
        .unwrap();
        let p = Vector3::new(10.0, -5.0, 200.0);
        let (_, jac) = project_point_with_jacobian(&p, &cam);
        let eps = 1e-6;
        for c in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[c] += eps;
            lo[c] -= eps;
            let project_one = |q: Vector3<f64>| {
                let h = cam.k() * q;
                Vector2::new(h.x / h.z, h.y / h.z)
            };
            let num = (project_one(hi) - project_one(lo)) / (2.0 * eps);
            assert_relative_eq!(jac[(0, c)], num.x, epsilon = 1e-6);
            assert_relative_eq!(jac[(1, c)], num.y, epsilon = 1e-6);
        }
    }

    fn sample_kp() -> Keypoints2D<f64> {
        Keypoints2D::with_uniform_confidence(vec![
            Vector2::new(3.0, 4.0),
            Vector2::new(5.0, 4.0),
            Vector2::new(4.0, 7.0),
            Vector2::new(2.0, 1.0),
        ])
    }

    fn spec() -> NormalizationSpec {
        NormalizationSpec {
            origin: OriginRef::Midpoint(0, 1),
            scale: (0, 1),
        }
    }

    #[test]
    fn normalization_fixed_point() {
        // Already centered with unit reference distance: output = flattened input.
        let kp = Keypoints2D::with_uniform_confidence(vec![
            Vector2::new(-0.5, 0.0),
            Vector2::new(0.5, 0.0),
            Vector2::new(0.25, 0.75),
        ]);
        let out = normalize_keypoints(&kp, &spec()).unwrap();
        assert_eq!(out, vec![-0.5, 0.0, 0.5, 0.0, 0.25, 0.75]);
    }

    #[test]
    fn normalization_invariant_to_similarity_transforms() {
        let kp = sample_kp();
        let base = normalize_keypoints(&kp, &spec()).unwrap();

        let shifted = Keypoints2D::with_uniform_confidence(
            kp.points().iter().map(|p| p + Vector2::new(100.0, 50.0)).collect(),
        );
        let shifted_out = normalize_keypoints(&shifted, &spec()).unwrap();

        let scaled = Keypoints2D::with_uniform_confidence(
            kp.points().iter().map(|p| p * 3.0).collect(),
        );
        let scaled_out = normalize_keypoints(&scaled, &spec()).unwrap();

        for i in 0..base.len() {
            assert_relative_eq!(base[i], shifted_out[i], epsilon = 1e-9);
            assert_relative_eq!(base[i], scaled_out[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_confidence_points_are_zeroed() {
        let kp = Keypoints2D::new(
            vec![Vector2::new(-1.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(9.0, 9.0)],
            vec![1.0, 1.0, 0.0],
        )
        .unwrap();
        let out = normalize_keypoints(&kp, &spec()).unwrap();
        assert_eq!(&out[4..], &[0.0, 0.0]);
    }

    #[test]
    fn degenerate_scale_rejected() {
        let kp = Keypoints2D::with_uniform_confidence(vec![
            Vector2::new(1.0, 1.0),
            Vector2::new(1.0, 1.0),
        ]);
        assert!(matches!(
            normalize_keypoints(&kp, &spec()),
            Err(CameraError::DegenerateScale { .. })
        ));
    }

    #[test]
    fn out_of_range_reference_rejected() {
        let kp = Keypoints2D::with_uniform_confidence(vec![Vector2::new(0.0, 0.0)]);
        assert!(matches!(
            normalize_keypoints(&kp, &spec()),
            Err(CameraError::ReferenceJointMissing { .. })
        ));
    }

    #[test]
    fn camera_validation() {
        let mut k = Matrix3::identity();
        k[(1, 0)] = 0.5;
        assert!(CameraModel::new(k, Matrix3::identity(), Vector3::zeros()).is_err());

        let mut bad_r = Matrix3::identity();
        bad_r[(0, 0)] = 2.0;
        assert!(CameraModel::new(Matrix3::identity(), bad_r, Vector3::zeros()).is_err());

        assert!(CameraModel::from_intrinsics(
            -1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros()
        )
        .is_err());
    }

    #[test]
    fn confidence_range_validated() {
        let bad = Keypoints2D::new(vec![Vector2::new(0.0, 0.0)], vec![1.5]);
        assert!(matches!(bad, Err(CameraError::ConfidenceOutOfRange { .. })));
    }
}
