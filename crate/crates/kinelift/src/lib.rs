//! Lifts 2D human keypoints to valid 3D poses.
//!
//! Small neural networks predict constrained joint angles and bone lengths,
//! and a differentiable forward-kinematics layer composes them into a pose
//! that respects the skeleton's limits by construction. The crate also
//! contains the multiview inverse-kinematics fitter used to manufacture
//! ground-truth parameters from calibrated 2D observations, a synthetic
//! dataset generator, and the alignment/error evaluation stack.
//!
//! The numeric kernels are generic over [`scalar::Real`] (`f32` or `f64`);
//! file formats and the CLI use the `f64` aliases exported at the crate root.

pub mod camera;
pub mod kinematics;
pub mod nn;
pub mod evaluation;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod skeleton;
pub mod training;

pub use scalar::Real;

pub type SkeletonSpec64 = skeleton::SkeletonSpec<f64>;
pub type ValidatedSkeleton64 = skeleton::ValidatedSkeleton<f64>;
pub type BoneLengths64 = skeleton::BoneLengths<f64>;
pub type RawAngles64 = kinematics::RawAngles<f64>;
pub type JointAngles64 = kinematics::JointAngles<f64>;
pub type Pose3D64 = kinematics::Pose3D<f64>;
pub type RootPose64 = kinematics::RootPose<f64>;
pub type CameraModel64 = camera::CameraModel<f64>;
pub type Keypoints2D64 = camera::Keypoints2D<f64>;
