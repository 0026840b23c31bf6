//! Euler-angle constraining, rotation construction, forward kinematics over
//! the skeleton tree, and exact parameter Jacobians of joint positions.
//!
//! Forward kinematics walks the validated skeleton in breadth-first order and
//! applies, for each joint `i` with parent `j`,
//!
//! ```text
//! R_i = R_j * R'_i          (global = parent-global * local)
//! p_i = R_i * o_i + p_j     (o_i = bone length * rest direction)
//! ```
//!
//! where `R'_i` is built from the joint's constrained Euler angles in the
//! order its DoF are declared. The root has no offset: its global rotation is
//! its own local rotation (optionally pre-composed with the extra rotation in
//! [`RootPose`]) and its position is the root translation.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::skeleton::{Axis, BoneLengths, ValidatedSkeleton};

/// Reference frame a pose is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    World,
    Camera,
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Frame::World => write!(f, "world"),
            Frame::Camera => write!(f, "camera"),
        }
    }
}

/// Sigmoid-normalized angles, one entry in `[0, 1]` per skeleton DoF.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAngles<T> {
    values: Vec<T>,
}

impl<T: Real> RawAngles<T> {
    /// Builds the vector, validating every entry lies in `[0, 1]`.
    pub fn new(values: Vec<T>) -> Result<Self, KinematicsError> {
        for (i, &v) in values.iter().enumerate() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(KinematicsError::RawAngleOutOfRange {
                    index: i,
                    value: v.to_f64c(),
                });
            }
        }
        Ok(Self { values })
    }

    /// All entries at 0.5, i.e. every angle at its range midpoint.
    pub fn midpoints(total_dof: usize) -> Self {
        Self {
            values: vec![T::from_f64c(0.5); total_dof],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Joint angles in radians, in skeleton DoF order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAngles<T> {
    pub values: Vec<T>,
}

impl<T: Real> JointAngles<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Pose of the skeleton root: an extra Euler rotation (XYZ order, radians)
/// composed in front of the root's own DoF rotation, the root translation in
/// cm, and the frame the resulting pose is expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct RootPose<T> {
    pub rotation: Vector3<T>,
    pub translation: Vector3<T>,
    pub frame: Frame,
}

impl<T: Real> RootPose<T> {
    /// Identity rotation, zero translation, camera frame.
    pub fn at_origin(frame: Frame) -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
            frame,
        }
    }

    pub fn from_translation(translation: Vector3<T>, frame: Frame) -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation,
            frame,
        }
    }
}

impl<T: Real> Default for RootPose<T> {
    fn default() -> Self {
        Self::at_origin(Frame::Camera)
    }
}

/// Joint positions in cm, aligned with the validated skeleton's joint order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D<T> {
    pub frame: Frame,
    pub positions: Vec<Vector3<T>>,
}

impl<T: Real> Pose3D<T> {
    pub fn n_joints(&self) -> usize {
        self.positions.len()
    }
}

/// Forward-kinematics output: joint positions plus per-joint global rotations.
#[derive(Debug, Clone)]
pub struct FkResult<T> {
    pub pose: Pose3D<T>,
    pub rotations: Vec<Matrix3<T>>,
}

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{what} has {got} entries but the skeleton needs {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("raw angle {value} at index {index} is outside [0, 1]")]
    RawAngleOutOfRange { index: usize, value: f64 },
}

/// Elementary rotation about a coordinate axis (right-handed, column vectors).
pub fn axis_rotation<T: Real>(axis: Axis, angle: T) -> Matrix3<T> {
    let (s, c) = (angle.sin(), angle.cos());
    let (zero, one) = (T::zero(), T::one());
    match axis {
        Axis::X => Matrix3::new(one, zero, zero, zero, c, -s, zero, s, c),
        Axis::Y => Matrix3::new(c, zero, s, zero, one, zero, -s, zero, c),
        Axis::Z => Matrix3::new(c, -s, zero, s, c, zero, zero, zero, one),
    }
}

/// Derivative of [`axis_rotation`] with respect to the angle.
pub fn axis_rotation_derivative<T: Real>(axis: Axis, angle: T) -> Matrix3<T> {
    let (s, c) = (angle.sin(), angle.cos());
    let zero = T::zero();
    match axis {
        Axis::X => Matrix3::new(zero, zero, zero, zero, -s, -c, zero, c, -s),
        Axis::Y => Matrix3::new(-s, zero, c, zero, zero, zero, -c, zero, -s),
        Axis::Z => Matrix3::new(-s, -c, zero, c, -s, zero, zero, zero, zero),
    }
}

/// Builds a joint's local rotation from its angle slice: the product of
/// elementary rotations in declared DoF order, first-listed axis applied
/// first. An empty slice yields the identity.
pub fn euler_to_rotation<T: Real>(angles: &[T], axes: &[Axis]) -> Matrix3<T> {
    debug_assert_eq!(angles.len(), axes.len());
    let mut r = Matrix3::identity();
    for (&angle, &axis) in angles.iter().zip(axes) {
        r *= axis_rotation(axis, angle);
    }
    r
}

/// Maps sigmoid-normalized angles into each DoF's limit range:
/// `x = x_raw * (max - min) + min`, elementwise in radians.
pub fn constrain_angles<T: Real>(
    raw: &RawAngles<T>,
    skeleton: &ValidatedSkeleton<T>,
) -> Result<JointAngles<T>, KinematicsError> {
    if raw.len() != skeleton.total_dof() {
        return Err(KinematicsError::LengthMismatch {
            expected: skeleton.total_dof(),
            got: raw.len(),
        });
    }
    let lo = skeleton.dof_min_rad();
    let hi = skeleton.dof_max_rad();
    // Convex combination instead of `v * (hi - lo) + lo`: both endpoints are
    // exact in floating point, and the clamp removes any interior ULP
    // overshoot so outputs never violate the limits.
    let values = raw
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| (lo[i] * (T::one() - v) + hi[i] * v).clamp(lo[i], hi[i]))
        .collect();
    Ok(JointAngles::new(values))
}

/// Inverse of [`constrain_angles`]: radians back to `[0, 1]` coordinates.
pub fn unconstrain_angles<T: Real>(
    angles: &JointAngles<T>,
    skeleton: &ValidatedSkeleton<T>,
) -> Result<RawAngles<T>, KinematicsError> {
    if angles.len() != skeleton.total_dof() {
        return Err(KinematicsError::LengthMismatch {
            expected: skeleton.total_dof(),
            got: angles.len(),
        });
    }
    let lo = skeleton.dof_min_rad();
    let hi = skeleton.dof_max_rad();
    let values = angles
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - lo[i]) / (hi[i] - lo[i]))
        .collect();
    RawAngles::new(values)
}

/// Per-DoF constraint scale `(max - min)` in radians, the diagonal Jacobian
/// of [`constrain_angles`].
pub fn constraint_scale<T: Real>(skeleton: &ValidatedSkeleton<T>) -> Vec<T> {
    skeleton
        .dof_min_rad()
        .iter()
        .zip(skeleton.dof_max_rad())
        .map(|(&lo, &hi)| hi - lo)
        .collect()
}

fn check_dims<T: Real>(
    skeleton: &ValidatedSkeleton<T>,
    angles: &JointAngles<T>,
    bones: &BoneLengths<T>,
) -> Result<(), KinematicsError> {
    if angles.len() != skeleton.total_dof() {
        return Err(KinematicsError::DimensionMismatch {
            what: "angle vector",
            expected: skeleton.total_dof(),
            got: angles.len(),
        });
    }
    if bones.len() != skeleton.n_bones() {
        return Err(KinematicsError::DimensionMismatch {
            what: "bone lengths",
            expected: skeleton.n_bones(),
            got: bones.len(),
        });
    }
    Ok(())
}

/// Euler XYZ rotation used for the extra root rotation in [`RootPose`].
pub fn root_rotation_matrix<T: Real>(rotation: &Vector3<T>) -> Matrix3<T> {
    euler_to_rotation(
        rotation.as_slice(),
        &[Axis::X, Axis::Y, Axis::Z],
    )
}

/// Extracts angles `(a, b, c)` with `R = Rx(a) * Ry(b) * Rz(c)`.
///
/// `b` lies in `[-pi/2, pi/2]`; at gimbal lock (`|R02| = 1`) the redundant
/// angle `c` is set to zero. Recomposing always reproduces `R`.
pub fn euler_xyz_from_rotation<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let sb = r[(0, 2)].clamp(-T::one(), T::one());
    let b = sb.asin();
    if T::one() - sb.abs() > T::from_f64c(1e-9) {
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        Vector3::new(a, b, c)
    } else if sb > T::zero() {
        Vector3::new(r[(1, 0)].atan2(r[(1, 1)]), b, T::zero())
    } else {
        Vector3::new((-r[(1, 0)]).atan2(r[(1, 1)]), b, T::zero())
    }
}

/// Forward kinematics: positions and global rotations for every joint.
pub fn forward_kinematics_full<T: Real>(
    skeleton: &ValidatedSkeleton<T>,
    angles: &JointAngles<T>,
    bones: &BoneLengths<T>,
    root: &RootPose<T>,
) -> Result<FkResult<T>, KinematicsError> {
    check_dims(skeleton, angles, bones)?;
    let n = skeleton.n_joints();
    let mut rotations = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for (i, joint) in skeleton.joints().iter().enumerate() {
        let slice = &angles.values[joint.dof_offset..joint.dof_offset + joint.dof.len()];
        let axes = &skeleton.dof_axes()[joint.dof_offset..joint.dof_offset + joint.dof.len()];
        let local = euler_to_rotation(slice, axes);
        match joint.parent {
            None => {
                rotations.push(root_rotation_matrix(&root.rotation) * local);
                positions.push(root.translation);
            }
            Some(j) => {
                let global: Matrix3<T> = rotations[j] * local;
                let offset = joint.rest_direction * bones.for_joint(i);
                positions.push(global * offset + positions[j]);
                rotations.push(global);
            }
        }
    }
    Ok(FkResult {
        pose: Pose3D {
            frame: root.frame,
            positions,
        },
        rotations,
    })
}

/// Forward kinematics returning joint positions only.
pub fn forward_kinematics<T: Real>(
    skeleton: &ValidatedSkeleton<T>,
    angles: &JointAngles<T>,
    bones: &BoneLengths<T>,
    root: &RootPose<T>,
) -> Result<Pose3D<T>, KinematicsError> {
    forward_kinematics_full(skeleton, angles, bones, root).map(|full| full.pose)
}

/// Exact Jacobian of all joint positions with respect to all angles, all
/// bone lengths, and the 3 root translation components.
///
/// Rows are joint-major (`3 * joint + coordinate`); columns are laid out as
/// `[angles | bone lengths | root translation]`.
#[derive(Debug, Clone)]
pub struct FkJacobian<T> {
    matrix: DMatrix<T>,
    total_dof: usize,
    n_bones: usize,
}

impl<T: Real> FkJacobian<T> {
    pub fn n_params(&self) -> usize {
        self.total_dof + self.n_bones + 3
    }

    pub fn total_dof(&self) -> usize {
        self.total_dof
    }

    pub fn n_bones(&self) -> usize {
        self.n_bones
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    /// `d position(joint, coord) / d parameter(col)`.
    pub fn entry(&self, joint: usize, coord: usize, col: usize) -> T {
        self.matrix[(3 * joint + coord, col)]
    }

    /// Pulls a position-space gradient back to parameter space: `J^T g`.
    pub fn vjp(&self, position_grads: &[Vector3<T>]) -> DVector<T> {
        let rows = self.matrix.nrows();
        debug_assert_eq!(rows, 3 * position_grads.len());
        let mut flat = DVector::zeros(rows);
        for (j, g) in position_grads.iter().enumerate() {
            flat[3 * j] = g.x;
            flat[3 * j + 1] = g.y;
            flat[3 * j + 2] = g.z;
        }
        self.matrix.tr_mul(&flat)
    }

    /// Angle block of [`FkJacobian::vjp`].
    pub fn vjp_angles(&self, position_grads: &[Vector3<T>]) -> Vec<T> {
        self.vjp(position_grads).as_slice()[..self.total_dof].to_vec()
    }
}

/// Forward kinematics together with its Jacobian, sharing one traversal.
pub fn fk_with_jacobian<T: Real>(
    skeleton: &ValidatedSkeleton<T>,
    angles: &JointAngles<T>,
    bones: &BoneLengths<T>,
    root: &RootPose<T>,
) -> Result<(FkResult<T>, FkJacobian<T>), KinematicsError> {
    check_dims(skeleton, angles, bones)?;
    let n = skeleton.n_joints();
    let total_dof = skeleton.total_dof();
    let n_bones = skeleton.n_bones();
    let n_params = total_dof + n_bones + 3;

    let mut rotations: Vec<Matrix3<T>> = Vec::with_capacity(n);
    let mut positions: Vec<Vector3<T>> = Vec::with_capacity(n);
    // Per joint: global-rotation partials w.r.t. every angle, and position
    // partials w.r.t. every parameter. Dense over ancestors' angles; entries
    // for unrelated joints stay zero.
    let mut rot_partials: Vec<Vec<Matrix3<T>>> = Vec::with_capacity(n);
    let mut pos_partials: Vec<Vec<Vector3<T>>> = Vec::with_capacity(n);

    let q = root_rotation_matrix(&root.rotation);

    for (i, joint) in skeleton.joints().iter().enumerate() {
        let k = joint.dof.len();
        let slice = &angles.values[joint.dof_offset..joint.dof_offset + k];
        let axes = &skeleton.dof_axes()[joint.dof_offset..joint.dof_offset + k];

        // Local rotation and its partials w.r.t. each own angle: replace the
        // t-th factor of the product with the derivative matrix.
        let local = euler_to_rotation(slice, axes);
        let mut local_partials = Vec::with_capacity(k);
        for t in 0..k {
            let mut d = Matrix3::identity();
            for u in 0..k {
                let factor = if u == t {
                    axis_rotation_derivative(axes[u], slice[u])
                } else {
                    axis_rotation(axes[u], slice[u])
                };
                d *= factor;
            }
            local_partials.push(d);
        }

        let mut d_rot = vec![Matrix3::zeros(); total_dof];
        let mut d_pos = vec![Vector3::zeros(); n_params];

        match joint.parent {
            None => {
                rotations.push(q * local);
                positions.push(root.translation);
                for (t, dl) in local_partials.iter().enumerate() {
                    d_rot[joint.dof_offset + t] = q * dl;
                }
                // d p_0 / d translation = I; all other partials are zero.
                for c in 0..3 {
                    let mut e = Vector3::zeros();
                    e[c] = T::one();
                    d_pos[total_dof + n_bones + c] = e;
                }
            }
            Some(j) => {
                let global = rotations[j] * local;
                let offset = joint.rest_direction * bones.for_joint(i);
                positions.push(global * offset + positions[j]);
                rotations.push(global);

                let parent_rot = &rot_partials[j];
                for m in 0..total_dof {
                    d_rot[m] = parent_rot[m] * local;
                }
                for (t, dl) in local_partials.iter().enumerate() {
                    d_rot[joint.dof_offset + t] += rotations[j] * dl;
                }

                let parent_pos = &pos_partials[j];
                for m in 0..total_dof {
                    d_pos[m] = d_rot[m] * offset + parent_pos[m];
                }
                for b in 0..n_bones {
                    d_pos[total_dof + b] = parent_pos[total_dof + b];
                }
                // This joint's own bone: p_i = R_i * (len * dir) + p_j.
                d_pos[total_dof + (i - 1)] += global * joint.rest_direction;
                for c in 0..3 {
                    d_pos[total_dof + n_bones + c] = parent_pos[total_dof + n_bones + c];
                }
            }
        }

        rot_partials.push(d_rot);
        pos_partials.push(d_pos);
    }

    let mut matrix = DMatrix::zeros(3 * n, n_params);
    for (i, d_pos) in pos_partials.iter().enumerate() {
        for (col, v) in d_pos.iter().enumerate() {
            matrix[(3 * i, col)] = v.x;
            matrix[(3 * i + 1, col)] = v.y;
            matrix[(3 * i + 2, col)] = v.z;
        }
    }

    Ok((
        FkResult {
            pose: Pose3D {
                frame: root.frame,
                positions,
            },
            rotations,
        },
        FkJacobian {
            matrix,
            total_dof,
            n_bones,
        },
    ))
}

/// Jacobian of joint positions; see [`fk_with_jacobian`] for the layout.
pub fn fk_jacobian<T: Real>(
    skeleton: &ValidatedSkeleton<T>,
    angles: &JointAngles<T>,
    bones: &BoneLengths<T>,
    root: &RootPose<T>,
) -> Result<FkJacobian<T>, KinematicsError> {
    fk_with_jacobian(skeleton, angles, bones, root).map(|(_, jac)| jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{
        default_hand_spec, default_upper_body_spec, validate_skeleton, DofRange, JointSpec,
        SkeletonSpec,
    };
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn full_root_dof() -> Vec<DofRange<f64>> {
        [Axis::X, Axis::Y, Axis::Z]
            .into_iter()
            .map(|axis| DofRange {
                axis,
                min_deg: -180.0,
                max_deg: 180.0,
            })
            .collect()
    }

    /// root -> a -> b chain along +x with a 3-DoF joint at `a`.
    fn chain() -> ValidatedSkeleton<f64> {
        let spec = SkeletonSpec {
            root: "root".into(),
            joints: vec![
                JointSpec {
                    name: "root".into(),
                    parent: None,
                    rest_direction: Vector3::zeros(),
                    dof: full_root_dof(),
                },
                JointSpec {
                    name: "a".into(),
                    parent: Some("root".into()),
                    rest_direction: Vector3::new(1.0, 0.0, 0.0),
                    dof: vec![
                        DofRange { axis: Axis::X, min_deg: -180.0, max_deg: 180.0 },
                        DofRange { axis: Axis::Y, min_deg: -180.0, max_deg: 180.0 },
                        DofRange { axis: Axis::Z, min_deg: -180.0, max_deg: 180.0 },
                    ],
                },
                JointSpec {
                    name: "b".into(),
                    parent: Some("a".into()),
                    rest_direction: Vector3::new(1.0, 0.0, 0.0),
                    dof: vec![],
                },
            ],
            version: None,
            notes: None,
        };
        validate_skeleton(&spec).unwrap()
    }

    fn zero_angles(skeleton: &ValidatedSkeleton<f64>) -> JointAngles<f64> {
        JointAngles::new(vec![0.0; skeleton.total_dof()])
    }

    #[test]
    fn constrain_range_endpoints_and_midpoint() {
        let skeleton = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let n = skeleton.total_dof();

        let lo = constrain_angles(&RawAngles::new(vec![0.0; n]).unwrap(), &skeleton).unwrap();
        assert_eq!(lo.values, skeleton.dof_min_rad());

        let hi = constrain_angles(&RawAngles::new(vec![1.0; n]).unwrap(), &skeleton).unwrap();
        assert_eq!(hi.values, skeleton.dof_max_rad());

        // Symmetric range maps the midpoint to zero: head X is [-90, 90].
        let head = skeleton.find_joint("head").unwrap();
        let slot = skeleton.joint(head).dof_offset;
        let mid = constrain_angles(&RawAngles::midpoints(n), &skeleton).unwrap();
        assert_relative_eq!(mid.values[slot], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn constrain_rejects_bad_input() {
        let skeleton = chain();
        assert!(RawAngles::new(vec![1.5]).is_err());
        assert!(matches!(
            constrain_angles(&RawAngles::new(vec![0.5; 2]).unwrap(), &skeleton),
            Err(KinematicsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn unconstrain_inverts_constrain() {
        let skeleton = validate_skeleton(&default_hand_spec::<f64>()).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let raw =
            RawAngles::new((0..skeleton.total_dof()).map(|_| rng.random()).collect()).unwrap();
        let angles = constrain_angles(&raw, &skeleton).unwrap();
        let back = unconstrain_angles(&angles, &skeleton).unwrap();
        for (a, b) in raw.values().iter().zip(back.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_dof_gives_identity() {
        let r = euler_to_rotation::<f64>(&[], &[]);
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn single_z_rotation_maps_x_to_y() {
        let r = euler_to_rotation(&[FRAC_PI_2], &[Axis::Z]);
        let out = r * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(out, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn xyz_composition_matches_three_matrix_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let (a, b, c): (f64, f64, f64) = (
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
            );
            let composed = euler_to_rotation(&[a, b, c], &[Axis::X, Axis::Y, Axis::Z]);
            // Independent three-matrix product: Rx(a) * Ry(b) * Rz(c).
            let oracle =
                axis_rotation(Axis::X, a) * axis_rotation(Axis::Y, b) * axis_rotation(Axis::Z, c);
            assert_relative_eq!(composed, oracle, epsilon = 1e-15);
        }
    }

    #[test]
    fn rotations_stay_orthonormal() {
        let skeleton = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let raw = RawAngles::new(
                (0..skeleton.total_dof()).map(|_| rng.random()).collect(),
            )
            .unwrap();
            let angles = constrain_angles(&raw, &skeleton).unwrap();
            let bones = BoneLengths::uniform(skeleton.n_bones(), 10.0).unwrap();
            let full = forward_kinematics_full(
                &skeleton,
                &angles,
                &bones,
                &RootPose::at_origin(Frame::Camera),
            )
            .unwrap();
            for r in &full.rotations {
                let residual = (r.transpose() * r - Matrix3::identity()).abs().max();
                assert!(residual < 1e-9, "orthonormality residual {residual}");
                assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_chain_unrolls_offsets() {
        let skeleton = chain();
        let bones = BoneLengths::uniform(2, 1.0).unwrap();
        let pose = forward_kinematics(
            &skeleton,
            &zero_angles(&skeleton),
            &bones,
            &RootPose::at_origin(Frame::Camera),
        )
        .unwrap();
        assert_eq!(pose.positions[0], Vector3::zeros());
        assert_eq!(pose.positions[1], Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(pose.positions[2], Vector3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn bent_chain_matches_hand_computation() {
        // Rotating joint `a` by Rz(pi/2) turns the tail of the chain upward:
        // p_a = Rz(90)*(1,0,0) = (0,1,0), p_b = p_a + Rz(90)*(1,0,0) = (0,2,0).
        let skeleton = chain();
        let bones = BoneLengths::uniform(2, 1.0).unwrap();
        let mut angles = zero_angles(&skeleton);
        let a = skeleton.find_joint("a").unwrap();
        let z_slot = skeleton.joint(a).dof_offset + 2;
        angles.values[z_slot] = FRAC_PI_2;
        let pose = forward_kinematics(
            &skeleton,
            &angles,
            &bones,
            &RootPose::at_origin(Frame::Camera),
        )
        .unwrap();
        assert_relative_eq!(pose.positions[0], Vector3::zeros(), epsilon = 1e-15);
        assert_relative_eq!(pose.positions[1], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(pose.positions[2], Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-15);
    }

    fn random_configuration(
        skeleton: &ValidatedSkeleton<f64>,
        rng: &mut StdRng,
    ) -> (JointAngles<f64>, BoneLengths<f64>, RootPose<f64>) {
        let raw = RawAngles::new(
            (0..skeleton.total_dof()).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let angles = constrain_angles(&raw, skeleton).unwrap();
        let bones = BoneLengths::new(
            (0..skeleton.n_bones())
                .map(|_| rng.random_range(5.0..40.0))
                .collect(),
        )
        .unwrap();
        let root = RootPose {
            rotation: Vector3::zeros(),
            translation: Vector3::new(
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
            ),
            frame: Frame::Camera,
        };
        (angles, bones, root)
    }

    #[test]
    fn bone_lengths_preserved_over_random_draws() {
        let skeleton = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..1000 {
            let (angles, bones, root) = random_configuration(&skeleton, &mut rng);
            let pose = forward_kinematics(&skeleton, &angles, &bones, &root).unwrap();
            for (child, parent) in skeleton.edges() {
                let measured = (pose.positions[child] - pose.positions[parent]).norm();
                let expected = bones.for_joint(child);
                assert_relative_eq!(measured, expected, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let skeleton = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let mut rng = StdRng::seed_from_u64(23);
        let (angles, bones, root) = random_configuration(&skeleton, &mut rng);
        let base = forward_kinematics(&skeleton, &angles, &bones, &root).unwrap();

        let mut shifted_root = root.clone();
        shifted_root.translation += Vector3::new(5.0, 0.0, 0.0);
        let shifted = forward_kinematics(&skeleton, &angles, &bones, &shifted_root).unwrap();
        for (a, b) in base.positions.iter().zip(&shifted.positions) {
            assert_relative_eq!(b - a, Vector3::new(5.0, 0.0, 0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_equivariance_through_root_pose() {
        let skeleton = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..20 {
            let (angles, bones, root) = random_configuration(&skeleton, &mut rng);
            let base = forward_kinematics(&skeleton, &angles, &bones, &root).unwrap();

            let euler = Vector3::new(
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
            );
            let q = root_rotation_matrix(&euler);
            let mut augmented_root = root.clone();
            augmented_root.rotation = euler;
            let augmented =
                forward_kinematics(&skeleton, &angles, &bones, &augmented_root).unwrap();

            let p0 = base.positions[0];
            for (a, b) in base.positions.iter().zip(&augmented.positions) {
                let expected = q * (a - p0) + p0;
                assert_relative_eq!(*b, expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fk_is_deterministic() {
        let skeleton = validate_skeleton(&default_hand_spec::<f64>()).unwrap();
        let mut rng = StdRng::seed_from_u64(31);
        let (angles, bones, root) = random_configuration(&skeleton, &mut rng);
        let a = forward_kinematics(&skeleton, &angles, &bones, &root).unwrap();
        let b = forward_kinematics(&skeleton, &angles, &bones, &root).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jacobian_root_rows_depend_only_on_translation() {
        let skeleton = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let mut rng = StdRng::seed_from_u64(37);
        let (angles, bones, root) = random_configuration(&skeleton, &mut rng);
        let jac = fk_jacobian(&skeleton, &angles, &bones, &root).unwrap();
        for col in 0..skeleton.total_dof() + skeleton.n_bones() {
            for coord in 0..3 {
                assert_eq!(jac.entry(0, coord, col), 0.0);
            }
        }
    }

    #[test]
    fn bone_column_is_rotated_rest_direction() {
        let skeleton = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let mut rng = StdRng::seed_from_u64(41);
        let (angles, bones, root) = random_configuration(&skeleton, &mut rng);
        let (full, jac) = fk_with_jacobian(&skeleton, &angles, &bones, &root).unwrap();
        for (i, joint) in skeleton.joints().iter().enumerate().skip(1) {
            let expected = full.rotations[i] * joint.rest_direction;
            let col = skeleton.total_dof() + (i - 1);
            for coord in 0..3 {
                assert_relative_eq!(jac.entry(i, coord, col), expected[coord], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for spec in [default_upper_body_spec::<f64>(), default_hand_spec::<f64>()] {
            let skeleton = validate_skeleton(&spec).unwrap();
            let mut rng = StdRng::seed_from_u64(43);
            for _ in 0..10 {
                let (angles, bones, root) = random_configuration(&skeleton, &mut rng);
                let jac = fk_jacobian(&skeleton, &angles, &bones, &root).unwrap();
                let max_err = jacobian_fd_max_error(&skeleton, &angles, &bones, &root, &jac);
                assert!(max_err < 1e-5, "finite-difference mismatch {max_err}");
            }
        }
    }

    /// Central-difference oracle over every parameter column.
    fn jacobian_fd_max_error(
        skeleton: &ValidatedSkeleton<f64>,
        angles: &JointAngles<f64>,
        bones: &BoneLengths<f64>,
        root: &RootPose<f64>,
        jac: &FkJacobian<f64>,
    ) -> f64 {
        let eps = 1e-6;
        let eval = |angles: &JointAngles<f64>, bones: &BoneLengths<f64>, root: &RootPose<f64>| {
            forward_kinematics(skeleton, angles, bones, root)
                .unwrap()
                .positions
        };
        let mut max_err: f64 = 0.0;
        let mut check = |col: usize, plus: Vec<Vector3<f64>>, minus: Vec<Vector3<f64>>| {
            for (joint, (p, m)) in plus.iter().zip(&minus).enumerate() {
                let numeric = (p - m) / (2.0 * eps);
                for coord in 0..3 {
                    let err = (jac.entry(joint, coord, col) - numeric[coord]).abs();
                    max_err = max_err.max(err);
                }
            }
        };
        for d in 0..skeleton.total_dof() {
            let mut hi = angles.clone();
            let mut lo = angles.clone();
            hi.values[d] += eps;
            lo.values[d] -= eps;
            check(d, eval(&hi, bones, root), eval(&lo, bones, root));
        }
        for b in 0..skeleton.n_bones() {
            let mut hi = bones.values().to_vec();
            let mut lo = bones.values().to_vec();
            hi[b] += eps;
            lo[b] -= eps;
            check(
                skeleton.total_dof() + b,
                eval(angles, &BoneLengths::new(hi).unwrap(), root),
                eval(angles, &BoneLengths::new(lo).unwrap(), root),
            );
        }
        for c in 0..3 {
            let mut hi = root.clone();
            let mut lo = root.clone();
            hi.translation[c] += eps;
            lo.translation[c] -= eps;
            check(
                skeleton.total_dof() + skeleton.n_bones() + c,
                eval(angles, bones, &hi),
                eval(angles, bones, &lo),
            );
        }
        max_err
    }

    #[test]
    fn euler_extraction_round_trips_through_matrix() {
        let mut rng = StdRng::seed_from_u64(47);
        for _ in 0..200 {
            let euler = Vector3::new(
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
            );
            let r = root_rotation_matrix(&euler);
            let extracted = euler_xyz_from_rotation(&r);
            let again = root_rotation_matrix(&extracted);
            assert_relative_eq!(r, again, epsilon = 1e-9);
        }
        // Gimbal-lock cases.
        for sb in [1.0f64, -1.0] {
            let euler = Vector3::new(0.7, sb * FRAC_PI_2, -0.3);
            let r = root_rotation_matrix(&euler);
            let again = root_rotation_matrix(&euler_xyz_from_rotation(&r));
            assert_relative_eq!(r, again, epsilon = 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let skeleton = chain();
        let bones = BoneLengths::uniform(1, 1.0).unwrap();
        assert!(matches!(
            forward_kinematics(
                &skeleton,
                &zero_angles(&skeleton),
                &bones,
                &RootPose::at_origin(Frame::Camera)
            ),
            Err(KinematicsError::DimensionMismatch { .. })
        ));
    }
}
