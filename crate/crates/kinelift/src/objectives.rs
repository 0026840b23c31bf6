//! Supervision losses and their gradients with respect to the predicted
//! quantities: angular L1, weighted 3D Euclidean distance, reprojection
//! pixel distance, and the fixed / homoscedastic-uncertainty combination.

use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::{project_point_with_jacobian, CameraError, CameraModel, Keypoints2D};
use crate::kinematics::{Frame, JointAngles, Pose3D};
use crate::scalar::{real, Real};
use crate::skeleton::ValidatedSkeleton;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("poses are in different frames ({a} vs {b})")]
    FrameMismatch { a: Frame, b: Frame },
    #[error("no loss terms enabled")]
    NoTermsEnabled,
    #[error("per-joint weights must be positive (weight {value} at joint {index})")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// How per-term losses are combined.
#[derive(Debug, Clone, PartialEq)]
pub enum CombineMode<T> {
    /// `sum_k w_k * L_k` with fixed weights.
    Fixed(Vec<T>),
    /// `sum_k exp(-s_k) * L_k + s_k` with learnable log-variances `s_k`.
    Kendall(Vec<T>),
}

/// Loss weighting: per-joint emphasis (wrists) for the 3D term plus the
/// term-combination mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights<T> {
    pub joint_weights: Vec<T>,
    pub combine: CombineMode<T>,
}

impl<T: Real> LossWeights<T> {
    /// Uniform joint weights except `wrist_weight` on joints whose name
    /// contains "wrist"; single fixed term.
    pub fn default_for(skeleton: &ValidatedSkeleton<T>, wrist_weight: T) -> Self {
        let joint_weights = skeleton
            .joint_names()
            .map(|name| {
                if name.contains("wrist") {
                    wrist_weight
                } else {
                    T::one()
                }
            })
            .collect();
        Self {
            joint_weights,
            combine: CombineMode::Fixed(vec![T::one()]),
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (index, &w) in self.joint_weights.iter().enumerate() {
            if !(w > T::zero()) {
                return Err(ObjectiveError::NonPositiveWeight {
                    index,
                    value: w.to_f64c(),
                });
            }
        }
        Ok(())
    }
}

/// Mean absolute difference over DoF, with the subgradient (0 at ties)
/// with respect to the prediction.
pub fn loss_angular<T: Real>(
    pred: &JointAngles<T>,
    gt: &JointAngles<T>,
) -> Result<(T, Vec<T>), ObjectiveError> {
    if pred.len() != gt.len() {
        return Err(ObjectiveError::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let n = real::<T>(pred.len() as f64);
    let inv = T::one() / n;
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        let d = p - g;
        total += d.abs();
        grad.push(if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        });
    }
    Ok((total * inv, grad))
}

/// Weighted mean of per-joint Euclidean distances (cm), with the gradient
/// with respect to the predicted positions.
pub fn loss_3d<T: Real>(
    pred: &Pose3D<T>,
    gt: &Pose3D<T>,
    joint_weights: &[T],
) -> Result<(T, Vec<Vector3<T>>), ObjectiveError> {
    if pred.frame != gt.frame {
        return Err(ObjectiveError::FrameMismatch {
            a: pred.frame,
            b: gt.frame,
        });
    }
    if pred.n_joints() != gt.n_joints() || joint_weights.len() != pred.n_joints() {
        return Err(ObjectiveError::LengthMismatch {
            expected: gt.n_joints(),
            got: pred.n_joints().min(joint_weights.len()),
        });
    }
    let weight_sum: T = joint_weights.iter().copied().fold(T::zero(), |a, b| a + b);
    let inv_sum = T::one() / weight_sum;
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(pred.n_joints());
    for ((p, g), &w) in pred.positions.iter().zip(&gt.positions).zip(joint_weights) {
        let delta = p - g;
        let dist = delta.norm();
        total += w * dist;
        if dist > T::zero() {
            grads.push(delta * (w * inv_sum / dist));
        } else {
            grads.push(Vector3::zeros());
        }
    }
    Ok((total * inv_sum, grads))
}

/// Squared variant of [`loss_3d`] (weighted mean of squared distances), used
/// where a smooth objective matters more than the paper-faithful metric.
pub fn loss_3d_squared<T: Real>(
    pred: &Pose3D<T>,
    gt: &Pose3D<T>,
    joint_weights: &[T],
) -> Result<(T, Vec<Vector3<T>>), ObjectiveError> {
    if pred.frame != gt.frame {
        return Err(ObjectiveError::FrameMismatch {
            a: pred.frame,
            b: gt.frame,
        });
    }
    if pred.n_joints() != gt.n_joints() || joint_weights.len() != pred.n_joints() {
        return Err(ObjectiveError::LengthMismatch {
            expected: gt.n_joints(),
            got: pred.n_joints().min(joint_weights.len()),
        });
    }
    let weight_sum: T = joint_weights.iter().copied().fold(T::zero(), |a, b| a + b);
    let inv_sum = T::one() / weight_sum;
    let two = real::<T>(2.0);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(pred.n_joints());
    for ((p, g), &w) in pred.positions.iter().zip(&gt.positions).zip(joint_weights) {
        let delta = p - g;
        total += w * delta.norm_squared();
        grads.push(delta * (two * w * inv_sum));
    }
    Ok((total * inv_sum, grads))
}

/// Whether reprojection residuals enter as pixel distances or squared pixel
/// distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    Euclidean,
    Squared,
}

/// Mean pixel distance between the projection of a camera-frame pose and
/// observed keypoints, with the gradient chained through the projection back
/// to the 3D positions.
pub fn loss_reprojection<T: Real>(
    pred: &Pose3D<T>,
    cam: &CameraModel<T>,
    gt2d: &Keypoints2D<T>,
) -> Result<(T, Vec<Vector3<T>>), ObjectiveError> {
    loss_reprojection_mode(pred, cam, gt2d, ResidualMode::Euclidean)
}

/// [`loss_reprojection`] with a selectable residual mode.
pub fn loss_reprojection_mode<T: Real>(
    pred: &Pose3D<T>,
    cam: &CameraModel<T>,
    gt2d: &Keypoints2D<T>,
    mode: ResidualMode,
) -> Result<(T, Vec<Vector3<T>>), ObjectiveError> {
    if pred.frame != Frame::Camera {
        return Err(ObjectiveError::FrameMismatch {
            a: pred.frame,
            b: Frame::Camera,
        });
    }
    if pred.n_joints() != gt2d.len() {
        return Err(ObjectiveError::LengthMismatch {
            expected: gt2d.len(),
            got: pred.n_joints(),
        });
    }
    let n = real::<T>(pred.n_joints() as f64);
    let inv = T::one() / n;
    let two = real::<T>(2.0);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(pred.n_joints());
    for (joint, (p, obs)) in pred.positions.iter().zip(gt2d.points()).enumerate() {
        if !(p.z > T::zero()) {
            return Err(ObjectiveError::Camera(CameraError::BehindCamera {
                joint,
                z: p.z.to_f64c(),
            }));
        }
        let (uv, jac) = project_point_with_jacobian(p, cam);
        let residual = uv - obs;
        match mode {
            ResidualMode::Euclidean => {
                let dist = residual.norm();
                total += dist;
                if dist > T::zero() {
                    let d_uv = residual * (inv / dist);
                    grads.push(jac.tr_mul(&d_uv));
                } else {
                    grads.push(Vector3::zeros());
                }
            }
            ResidualMode::Squared => {
                total += residual.norm_squared();
                let d_uv = residual * (two * inv);
                grads.push(jac.tr_mul(&d_uv));
            }
        }
    }
    Ok((total * inv, grads))
}

/// Result of combining loss terms; `d_terms` chains into each term's own
/// gradient, `d_log_variances` is present in Kendall mode for training the
/// log-variances themselves.
#[derive(Debug, Clone)]
pub struct CombinedLoss<T> {
    pub value: T,
    pub d_terms: Vec<T>,
    pub d_log_variances: Option<Vec<T>>,
}

/// Combines term losses either with fixed weights or with the learnable
/// log-variance (homoscedastic uncertainty) weighting
/// `sum_k exp(-s_k) L_k + s_k`.
pub fn loss_combined<T: Real>(
    terms: &[T],
    mode: &CombineMode<T>,
) -> Result<CombinedLoss<T>, ObjectiveError> {
    if terms.is_empty() {
        return Err(ObjectiveError::NoTermsEnabled);
    }
    match mode {
        CombineMode::Fixed(weights) => {
            if weights.len() != terms.len() {
                return Err(ObjectiveError::LengthMismatch {
                    expected: terms.len(),
                    got: weights.len(),
                });
            }
            let value = terms
                .iter()
                .zip(weights)
                .fold(T::zero(), |acc, (&l, &w)| acc + w * l);
            Ok(CombinedLoss {
                value,
                d_terms: weights.clone(),
                d_log_variances: None,
            })
        }
        CombineMode::Kendall(log_variances) => {
            if log_variances.len() != terms.len() {
                return Err(ObjectiveError::LengthMismatch {
                    expected: terms.len(),
                    got: log_variances.len(),
                });
            }
            let mut value = T::zero();
            let mut d_terms = Vec::with_capacity(terms.len());
            let mut d_s = Vec::with_capacity(terms.len());
            for (&l, &s) in terms.iter().zip(log_variances) {
                let precision = (-s).exp();
                value += precision * l + s;
                d_terms.push(precision);
                d_s.push(T::one() - precision * l);
            }
            Ok(CombinedLoss {
                value,
                d_terms,
                d_log_variances: Some(d_s),
            })
        }
    }
}
