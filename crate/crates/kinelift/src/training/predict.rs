//! Monocular prediction: body and hand networks run on normalized 2D
//! keypoints, and the hands are attached at the body wrists. One shared hand
//! model serves both sides by mirroring the left hand's input and output.

use nalgebra::Vector3;

use super::TrainingError;
use crate::camera::{normalize_keypoints, Keypoints2D, NormalizationSpec};
use crate::kinematics::{
    constrain_angles, forward_kinematics_full, FkResult, Frame, JointAngles, Pose3D, RawAngles,
    RootPose,
};
use crate::nn::{mlp_forward, MlpModel};
use crate::scalar::Real;
use crate::skeleton::{mirror_hand, BoneLengths, ValidatedSkeleton};

/// An angle network and bone network trained for one skeleton, plus the
/// input normalization they were trained with.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub angle_net: MlpModel<T>,
    pub bone_net: MlpModel<T>,
    pub normalization: NormalizationSpec,
    pub skeleton: ValidatedSkeleton<T>,
}

/// Body models plus the optional shared hand models.
#[derive(Debug, Clone)]
pub struct Lifter<T> {
    pub body: ModelBundle<T>,
    pub hand: Option<ModelBundle<T>>,
}

/// One predicted hand: its wrist-relative pose and the same pose attached
/// to the body wrist.
#[derive(Debug, Clone)]
pub struct HandResult<T> {
    pub local: Pose3D<T>,
    pub attached: Pose3D<T>,
    pub angles: JointAngles<T>,
    pub bones: BoneLengths<T>,
}

/// Full prediction for one image worth of keypoints. The body pose sits in
/// the camera frame with its root at the origin (the pipeline does not
/// predict the pose origin).
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub body: Pose3D<T>,
    pub body_angles: JointAngles<T>,
    pub body_bones: BoneLengths<T>,
    pub left_hand: Option<HandResult<T>>,
    pub right_hand: Option<HandResult<T>>,
}

fn usable<T: Real>(kp: &Keypoints2D<T>) -> bool {
    !kp.is_empty() && kp.confidence().iter().any(|c| !c.is_zero())
}

fn lift<T: Real>(
    bundle: &ModelBundle<T>,
    kp: &Keypoints2D<T>,
) -> Result<(FkResult<T>, JointAngles<T>, BoneLengths<T>), TrainingError> {
    let input = normalize_keypoints(kp, &bundle.normalization)?;
    let (raw_out, _) = mlp_forward(&bundle.angle_net, &input)?;
    let angles = constrain_angles(&RawAngles::new(raw_out)?, &bundle.skeleton)?;
    let (lengths, _) = mlp_forward(&bundle.bone_net, &input)?;
    let bones = BoneLengths::new(lengths)?;
    let fk = forward_kinematics_full(
        &bundle.skeleton,
        &angles,
        &bones,
        &RootPose::at_origin(Frame::Camera),
    )?;
    Ok((fk, angles, bones))
}

/// Runs the shared hand model for one hand. For the left hand (`mirrored`)
/// the input keypoints are mirrored before the network and the predicted
/// positions are mirrored back afterwards.
pub fn predict_hand_local<T: Real>(
    bundle: &ModelBundle<T>,
    kp: &Keypoints2D<T>,
    mirrored: bool,
) -> Result<(Pose3D<T>, JointAngles<T>, BoneLengths<T>), TrainingError> {
    let input_kp = if mirrored { mirror_hand(kp) } else { kp.clone() };
    let (fk, angles, bones) = lift(bundle, &input_kp)?;
    let mut pose = fk.pose;
    if mirrored {
        for p in &mut pose.positions {
            p.x = -p.x;
        }
    }
    Ok((pose, angles, bones))
}

/// Lifts body (and optionally hand) keypoints to a 3D pose.
///
/// Hands with missing or fully failed detections are skipped rather than
/// failing the prediction; the body input is mandatory.
pub fn predict_pose<T: Real>(
    lifter: &Lifter<T>,
    kp_body: &Keypoints2D<T>,
    kp_left: Option<&Keypoints2D<T>>,
    kp_right: Option<&Keypoints2D<T>>,
) -> Result<Prediction<T>, TrainingError> {
    if !usable(kp_body) {
        return Err(TrainingError::MissingBodyInput);
    }
    let (body_fk, body_angles, body_bones) = lift(&lifter.body, kp_body)?;

    let mut left_hand = None;
    let mut right_hand = None;
    if let Some(hand) = &lifter.hand {
        let attach = |wrist_name: &str,
                      kp: Option<&Keypoints2D<T>>,
                      mirrored: bool|
         -> Result<Option<HandResult<T>>, TrainingError> {
            let Some(kp) = kp else { return Ok(None) };
            if !usable(kp) {
                return Ok(None);
            }
            let Some(wrist) = lifter.body.skeleton.find_joint(wrist_name) else {
                return Ok(None);
            };
            let (local, angles, bones) = predict_hand_local(hand, kp, mirrored)?;
            // Hand root pose = body wrist position and orientation.
            let rot = body_fk.rotations[wrist];
            let origin: Vector3<T> = body_fk.pose.positions[wrist];
            let attached = Pose3D {
                frame: Frame::Camera,
                positions: local.positions.iter().map(|p| rot * p + origin).collect(),
            };
            Ok(Some(HandResult {
                local,
                attached,
                angles,
                bones,
            }))
        };
        left_hand = attach("left_wrist", kp_left, true)?;
        right_hand = attach("right_wrist", kp_right, false)?;
    }

    Ok(Prediction {
        body: body_fk.pose,
        body_angles,
        body_bones,
        left_hand,
        right_hand,
    })
}
