//! End-to-end training of the angle and bone networks through the FK layer,
//! synthetic dataset generation, sequence-level splits, and the monocular
//! prediction pipeline that assembles body and hands into one 3D pose.

mod predict;
mod split;
mod synth;
mod train;

pub use predict::{predict_hand_local, predict_pose, HandResult, Lifter, ModelBundle, Prediction};
pub use split::{split_dataset, DatasetSplit};
pub use synth::{generate_and_load, synth_dataset, Dataset, DatasetMeta, FrameData, SynthConfig, SynthSummary};
pub use train::{
    mean_per_joint_error_cm, predict_angles, train_angle_net, train_bone_net, BoneSupervision,
    EpochStats, LossSettings, OptimSettings, TrainLog, TrainOutcome,
};

use thiserror::Error;

use crate::camera::{CameraError, CameraModel, Keypoints2D};
use crate::kinematics::{JointAngles, KinematicsError, Pose3D, RootPose};
use crate::nn::NnError;
use crate::objectives::ObjectiveError;
use crate::scalar::Real;
use crate::skeleton::{BoneLengths, SkeletonError};

/// One training sample: a normalized 2D input plus whichever supervision
/// targets the dataset provides.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    /// Normalized, flattened 2D keypoints (the network input).
    pub input2d: Vec<T>,
    /// Ground-truth pose in the observing camera's frame.
    pub gt_pose_cam: Option<Pose3D<T>>,
    /// Ground-truth pose in the world frame.
    pub gt_pose_world: Option<Pose3D<T>>,
    pub gt_angles: Option<JointAngles<T>>,
    pub gt_bones: Option<BoneLengths<T>>,
    /// Raw (unnormalized) 2D observations for reprojection supervision.
    pub gt2d: Option<Keypoints2D<T>>,
    pub camera: Option<CameraModel<T>>,
    /// Root pose in the camera frame (translation only; orientation is the
    /// network's job).
    pub root_cam: Option<RootPose<T>>,
    pub root_world: Option<RootPose<T>>,
    pub confidence: Vec<T>,
    pub sequence: usize,
    pub frame: usize,
}

impl<T: Real> Sample<T> {
    /// A sample must carry at least one usable supervision target.
    pub fn has_supervision(&self) -> bool {
        self.gt_pose_cam.is_some()
            || self.gt_pose_world.is_some()
            || self.gt_angles.is_some()
            || self.gt_bones.is_some()
            || self.gt2d.is_some()
    }
}

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("sample {index} is missing {what}, required by the configured loss")]
    MissingSupervision { index: usize, what: &'static str },
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("need at least 10 sequences to split, got {0}")]
    TooFewSequences(usize),
    #[error("no samples available")]
    EmptyDataset,
    #[error("no loss terms enabled in the training configuration")]
    NoTermsEnabled,
    #[error("body keypoints are missing or contain no usable detections")]
    MissingBodyInput,
    #[error("skeleton has no joint named `{0}`")]
    MissingJoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("objective error: {0}")]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("failed to parse dataset file: {0}")]
    Parse(#[from] serde_json::Error),
}
