//! Mini-batch Adam training of the angle and bone networks.
//!
//! The angle network is trained through the full constrain -> FK -> loss
//! chain (with ground-truth bone lengths and origin), the bone network
//! either directly against ground-truth lengths or through FK with
//! ground-truth angles. Training is strictly sequential and bit-reproducible
//! for a fixed seed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, TrainingError};
use crate::kinematics::{
    constrain_angles, constraint_scale, fk_with_jacobian, forward_kinematics, JointAngles,
    RawAngles,
};
use crate::nn::{init_model, mlp_backward, mlp_forward, ArchitectureSpec, GradientSet, MlpModel};
use crate::objectives::{
    loss_3d, loss_3d_squared, loss_angular, loss_combined, loss_reprojection_mode, CombineMode,
    LossWeights, ResidualMode,
};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::scalar::{real, Real};
use crate::skeleton::{BoneLengths, ValidatedSkeleton};

/// Optimizer and schedule settings for network training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
        }
    }
}

impl OptimSettings {
    fn adam_params<T: Real>(&self) -> AdamParams<T> {
        AdamParams {
            lr: real(self.lr),
            beta1: real(self.beta1),
            beta2: real(self.beta2),
            epsilon: real(self.epsilon),
        }
    }
}

/// Which supervision terms drive the angle network and how they combine.
#[derive(Debug, Clone)]
pub struct LossSettings<T> {
    pub angular: bool,
    pub pose3d: bool,
    pub reprojection: bool,
    /// Weights (or initial log-variances) for the enabled terms, in the
    /// order angular, 3D, reprojection.
    pub combine: CombineMode<T>,
    pub wrist_weight: T,
    /// Use squared distances in the 3D and reprojection terms.
    pub squared: bool,
}

impl<T: Real> LossSettings<T> {
    /// The shipped default: 3D Euclidean loss with wrist emphasis 5.
    pub fn pose3d_default() -> Self {
        Self {
            angular: false,
            pose3d: true,
            reprojection: false,
            combine: CombineMode::Fixed(vec![T::one()]),
            wrist_weight: real(5.0),
            squared: false,
        }
    }

    pub fn angular_only() -> Self {
        Self {
            angular: true,
            pose3d: false,
            reprojection: false,
            combine: CombineMode::Fixed(vec![T::one()]),
            wrist_weight: real(5.0),
            squared: false,
        }
    }

    fn n_terms(&self) -> usize {
        usize::from(self.angular) + usize::from(self.pose3d) + usize::from(self.reprojection)
    }

    fn validate(&self) -> Result<(), TrainingError> {
        let n = self.n_terms();
        if n == 0 {
            return Err(TrainingError::NoTermsEnabled);
        }
        let len = match &self.combine {
            CombineMode::Fixed(w) => w.len(),
            CombineMode::Kendall(s) => s.len(),
        };
        if len != n {
            return Err(TrainingError::Objective(
                crate::objectives::ObjectiveError::LengthMismatch {
                    expected: n,
                    got: len,
                },
            ));
        }
        Ok(())
    }
}

/// How the bone network is supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoneSupervision {
    /// FK + 3D error when ground-truth angles are available, otherwise the
    /// absolute difference to ground-truth bone values.
    Auto,
    Direct,
    Fk3d,
}

/// Per-epoch training statistics; row 0 is the untrained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Full training log, including the FK-evaluation counter used to verify
/// which loss modes touch the FK layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub fk_evaluations: u64,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,wall_ms\n");
        for row in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.epoch, row.train_loss, row.val_loss, row.lr, row.wall_ms
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<(), TrainingError> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// A trained model together with its log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: MlpModel<T>,
    pub log: TrainLog,
}

/// Per-sample forward/backward evaluation used by the shared training loop.
trait SamplePass<T: Real> {
    /// Returns the sample loss and, when requested, parameter gradients.
    fn evaluate(
        &mut self,
        model: &MlpModel<T>,
        sample: &Sample<T>,
        index: usize,
        want_grads: bool,
    ) -> Result<(T, Option<GradientSet<T>>), TrainingError>;

    /// Called once per batch after the model update (auxiliary parameters).
    fn end_batch(&mut self, batch_len: usize) -> Result<(), TrainingError>;

    fn fk_evaluations(&self) -> u64;
}

/// Trains the angle network: input 2D -> sigmoid angles -> limit re-scaling
/// -> FK with ground-truth bones and origin -> the configured losses.
pub fn train_angle_net<T: Real>(
    train: &[Sample<T>],
    val: &[Sample<T>],
    skeleton: &ValidatedSkeleton<T>,
    loss: &LossSettings<T>,
    arch: &ArchitectureSpec,
    optim: &OptimSettings,
    seed: u64,
) -> Result<TrainOutcome<T>, TrainingError> {
    loss.validate()?;
    for (index, sample) in train.iter().chain(val).enumerate() {
        if loss.angular && sample.gt_angles.is_none() {
            return Err(TrainingError::MissingSupervision {
                index,
                what: "ground-truth angles",
            });
        }
        if (loss.pose3d || loss.reprojection)
            && (sample.gt_bones.is_none() || sample.root_cam.is_none())
        {
            return Err(TrainingError::MissingSupervision {
                index,
                what: "ground-truth bones and camera-frame root",
            });
        }
        if loss.pose3d && sample.gt_pose_cam.is_none() {
            return Err(TrainingError::MissingSupervision {
                index,
                what: "camera-frame ground-truth pose",
            });
        }
        if loss.reprojection && (sample.gt2d.is_none() || sample.camera.is_none()) {
            return Err(TrainingError::MissingSupervision {
                index,
                what: "2D observations and camera",
            });
        }
    }

    let weights = LossWeights::default_for(skeleton, loss.wrist_weight);
    weights.validate()?;
    let model = init_model::<T>(arch, seed)?;
    let mut pass = AnglePass {
        skeleton,
        settings: loss.clone(),
        joint_weights: weights.joint_weights,
        scale: constraint_scale(skeleton),
        kendall: match &loss.combine {
            CombineMode::Kendall(s) => Some(KendallState {
                log_variances: s.clone(),
                adam: AdamState::new(s.len(), optim.adam_params()),
                grad_accum: vec![T::zero(); s.len()],
            }),
            CombineMode::Fixed(_) => None,
        },
        fk_evaluations: 0,
    };
    run_loop(model, train, val, optim, seed, &mut pass)
}

/// Trains the bone network under the chosen supervision rule.
pub fn train_bone_net<T: Real>(
    train: &[Sample<T>],
    val: &[Sample<T>],
    skeleton: &ValidatedSkeleton<T>,
    mode: BoneSupervision,
    arch: &ArchitectureSpec,
    optim: &OptimSettings,
    seed: u64,
) -> Result<TrainOutcome<T>, TrainingError> {
    let all_have = |f: &dyn Fn(&Sample<T>) -> bool| train.iter().chain(val).all(f);
    let resolved = match mode {
        BoneSupervision::Direct => BoneSupervision::Direct,
        BoneSupervision::Fk3d => BoneSupervision::Fk3d,
        BoneSupervision::Auto => {
            if all_have(&|s| {
                s.gt_angles.is_some() && s.gt_pose_world.is_some() && s.root_world.is_some()
            }) {
                BoneSupervision::Fk3d
            } else if all_have(&|s| s.gt_bones.is_some()) {
                BoneSupervision::Direct
            } else {
                return Err(TrainingError::MissingSupervision {
                    index: 0,
                    what: "either ground-truth bones or angles with a 3D pose",
                });
            }
        }
    };
    for (index, sample) in train.iter().chain(val).enumerate() {
        match resolved {
            BoneSupervision::Direct if sample.gt_bones.is_none() => {
                return Err(TrainingError::MissingSupervision {
                    index,
                    what: "ground-truth bone lengths",
                });
            }
            BoneSupervision::Fk3d
                if sample.gt_angles.is_none()
                    || sample.gt_pose_world.is_none()
                    || sample.root_world.is_none() =>
            {
                return Err(TrainingError::MissingSupervision {
                    index,
                    what: "ground-truth angles, world pose, and world root",
                });
            }
            _ => {}
        }
    }

    let model = init_model::<T>(arch, seed)?;
    let mut pass = BonePass {
        skeleton,
        mode: resolved,
        fk_evaluations: 0,
    };
    run_loop(model, train, val, optim, seed, &mut pass)
}

// --- shared loop -----------------------------------------------------------

fn run_loop<T: Real>(
    mut model: MlpModel<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    optim: &OptimSettings,
    seed: u64,
    pass: &mut dyn SamplePass<T>,
) -> Result<TrainOutcome<T>, TrainingError> {
    if train.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED);
    let mut state = AdamState::new(model.param_count(), optim.adam_params::<T>());
    let mut flat_params: Vec<T> = Vec::with_capacity(model.param_count());
    let mut flat_grads: Vec<T> = Vec::with_capacity(model.param_count());

    let eval_set = |pass: &mut dyn SamplePass<T>,
                    model: &MlpModel<T>,
                    set: &[Sample<T>]|
     -> Result<f64, TrainingError> {
        if set.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = T::zero();
        for (i, sample) in set.iter().enumerate() {
            let (loss, _) = pass.evaluate(model, sample, i, false)?;
            total += loss;
        }
        Ok((total / real::<T>(set.len() as f64)).to_f64c())
    };

    let mut log = TrainLog {
        epochs: Vec::new(),
        fk_evaluations: 0,
        best_epoch: 0,
    };

    // Epoch 0: the untrained model.
    let t0 = Instant::now();
    let train0 = eval_set(pass, &model, train)?;
    let val0 = eval_set(pass, &model, val)?;
    log.epochs.push(EpochStats {
        epoch: 0,
        train_loss: train0,
        val_loss: val0,
        lr: optim.lr,
        wall_ms: t0.elapsed().as_millis() as u64,
    });

    let mut best_model = model.clone();
    let mut best_val = val0;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    let mut indices: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=optim.max_epochs {
        let tick = Instant::now();
        indices.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for batch in indices.chunks(optim.batch_size) {
            let mut grads = GradientSet::zeros(&model);
            let inv = T::one() / real::<T>(batch.len() as f64);
            for &idx in batch {
                let (loss, sample_grads) = pass.evaluate(&model, &train[idx], idx, true)?;
                if !loss.is_finite_real() {
                    return Err(TrainingError::NonFiniteLoss { epoch });
                }
                epoch_loss += loss;
                grads.add_scaled(&sample_grads.expect("gradients requested"), inv);
            }
            flat_params.clear();
            model.write_params(&mut flat_params);
            flat_grads.clear();
            grads.write_flat(&mut flat_grads);
            adam_step(&mut flat_params, &flat_grads, &mut state)
                .expect("parameter/gradient shapes agree");
            model.read_params(&flat_params)?;
            pass.end_batch(batch.len())?;
        }
        let train_loss = (epoch_loss / real::<T>(train.len() as f64)).to_f64c();
        let val_loss = eval_set(pass, &model, val)?;
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: optim.lr,
            wall_ms: tick.elapsed().as_millis() as u64,
        });

        let monitored = if val.is_empty() { train_loss } else { val_loss };
        let reference = if val.is_empty() { best_val_or(train0, best_val) } else { best_val };
        if monitored < reference {
            best_val = monitored;
            best_model = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= optim.patience {
                break;
            }
        }
    }

    log.fk_evaluations = pass.fk_evaluations();
    log.best_epoch = best_epoch;
    Ok(TrainOutcome {
        model: best_model,
        log,
    })
}

fn best_val_or(fallback: f64, best: f64) -> f64 {
    if best.is_nan() {
        fallback
    } else {
        best
    }
}

// --- angle pass -------------------------------------------------------------

struct KendallState<T> {
    log_variances: Vec<T>,
    adam: AdamState<T>,
    grad_accum: Vec<T>,
}

struct AnglePass<'a, T> {
    skeleton: &'a ValidatedSkeleton<T>,
    settings: LossSettings<T>,
    joint_weights: Vec<T>,
    scale: Vec<T>,
    kendall: Option<KendallState<T>>,
    fk_evaluations: u64,
}

impl<T: Real> SamplePass<T> for AnglePass<'_, T> {
    fn evaluate(
        &mut self,
        model: &MlpModel<T>,
        sample: &Sample<T>,
        index: usize,
        want_grads: bool,
    ) -> Result<(T, Option<GradientSet<T>>), TrainingError> {
        let cfg = &self.settings;
        let (out, cache) = mlp_forward(model, &sample.input2d)?;
        let raw = RawAngles::new(out)?;
        let theta = constrain_angles(&raw, self.skeleton)?;

        let total_dof = self.skeleton.total_dof();
        let mut terms: Vec<T> = Vec::with_capacity(3);
        let mut term_grads: Vec<Vec<T>> = Vec::with_capacity(3);

        // FK is shared between the 3D and reprojection terms and skipped
        // entirely for angular-only supervision.
        let mut fk_data = None;
        if cfg.pose3d || cfg.reprojection {
            let bones = sample.gt_bones.as_ref().expect("validated upfront");
            let root = sample.root_cam.as_ref().expect("validated upfront");
            let pair = fk_with_jacobian(self.skeleton, &theta, bones, root)?;
            self.fk_evaluations += 1;
            fk_data = Some(pair);
        }

        if cfg.angular {
            let gt = sample.gt_angles.as_ref().ok_or(TrainingError::MissingSupervision {
                index,
                what: "ground-truth angles",
            })?;
            let (l, g) = loss_angular(&theta, gt)?;
            terms.push(l);
            if want_grads {
                term_grads.push(g);
            }
        }
        if cfg.pose3d {
            let (fk, jac) = fk_data.as_ref().expect("fk computed");
            let gt = sample.gt_pose_cam.as_ref().expect("validated upfront");
            let (l, g_pos) = if cfg.squared {
                loss_3d_squared(&fk.pose, gt, &self.joint_weights)?
            } else {
                loss_3d(&fk.pose, gt, &self.joint_weights)?
            };
            terms.push(l);
            if want_grads {
                term_grads.push(jac.vjp_angles(&g_pos));
            }
        }
        if cfg.reprojection {
            let (fk, jac) = fk_data.as_ref().expect("fk computed");
            let cam = sample.camera.as_ref().expect("validated upfront");
            let gt2d = sample.gt2d.as_ref().expect("validated upfront");
            let mode = if cfg.squared {
                ResidualMode::Squared
            } else {
                ResidualMode::Euclidean
            };
            let (l, g_pos) = loss_reprojection_mode(&fk.pose, cam, gt2d, mode)?;
            terms.push(l);
            if want_grads {
                term_grads.push(jac.vjp_angles(&g_pos));
            }
        }

        let combine = match &self.kendall {
            Some(k) => CombineMode::Kendall(k.log_variances.clone()),
            None => cfg.combine.clone(),
        };
        let combined = loss_combined(&terms, &combine)?;

        if !want_grads {
            return Ok((combined.value, None));
        }

        let mut g_theta = vec![T::zero(); total_dof];
        for (k, term_grad) in term_grads.iter().enumerate() {
            let w = combined.d_terms[k];
            for d in 0..total_dof {
                g_theta[d] += w * term_grad[d];
            }
        }
        let g_raw: Vec<T> = g_theta
            .iter()
            .zip(&self.scale)
            .map(|(&g, &s)| g * s)
            .collect();
        let grads = mlp_backward(model, &cache, &g_raw)?;

        if let (Some(kendall), Some(d_s)) = (&mut self.kendall, combined.d_log_variances) {
            for (acc, g) in kendall.grad_accum.iter_mut().zip(d_s) {
                *acc += g;
            }
        }
        Ok((combined.value, Some(grads)))
    }

    fn end_batch(&mut self, batch_len: usize) -> Result<(), TrainingError> {
        if let Some(kendall) = &mut self.kendall {
            let inv = T::one() / real::<T>(batch_len as f64);
            let grads: Vec<T> = kendall.grad_accum.iter().map(|&g| g * inv).collect();
            adam_step(&mut kendall.log_variances, &grads, &mut kendall.adam)
                .expect("log-variance shapes agree");
            kendall.grad_accum.fill(T::zero());
        }
        Ok(())
    }

    fn fk_evaluations(&self) -> u64 {
        self.fk_evaluations
    }
}

// --- bone pass ---------------------------------------------------------------

struct BonePass<'a, T> {
    skeleton: &'a ValidatedSkeleton<T>,
    mode: BoneSupervision,
    fk_evaluations: u64,
}

impl<T: Real> SamplePass<T> for BonePass<'_, T> {
    fn evaluate(
        &mut self,
        model: &MlpModel<T>,
        sample: &Sample<T>,
        _index: usize,
        want_grads: bool,
    ) -> Result<(T, Option<GradientSet<T>>), TrainingError> {
        let (out, cache) = mlp_forward(model, &sample.input2d)?;
        match self.mode {
            BoneSupervision::Direct => {
                let gt = sample.gt_bones.as_ref().expect("validated upfront");
                let n = real::<T>(out.len() as f64);
                let inv = T::one() / n;
                let mut loss = T::zero();
                let mut g_out = vec![T::zero(); out.len()];
                for (i, (&p, &t)) in out.iter().zip(gt.values()).enumerate() {
                    let d = p - t;
                    loss += d.abs();
                    g_out[i] = if d > T::zero() {
                        inv
                    } else if d < T::zero() {
                        -inv
                    } else {
                        T::zero()
                    };
                }
                loss *= inv;
                if !want_grads {
                    return Ok((loss, None));
                }
                Ok((loss, Some(mlp_backward(model, &cache, &g_out)?)))
            }
            BoneSupervision::Fk3d => {
                let angles = sample.gt_angles.as_ref().expect("validated upfront");
                let root = sample.root_world.as_ref().expect("validated upfront");
                let gt_pose = sample.gt_pose_world.as_ref().expect("validated upfront");
                let bones = BoneLengths::new(out)?;
                let weights = vec![T::one(); self.skeleton.n_joints()];
                if want_grads {
                    let (fk, jac) = fk_with_jacobian(self.skeleton, angles, &bones, root)?;
                    self.fk_evaluations += 1;
                    let (loss, g_pos) = loss_3d(&fk.pose, gt_pose, &weights)?;
                    let pulled = jac.vjp(&g_pos);
                    let total_dof = self.skeleton.total_dof();
                    let g_out: Vec<T> = (0..self.skeleton.n_bones())
                        .map(|b| pulled[total_dof + b])
                        .collect();
                    Ok((loss, Some(mlp_backward(model, &cache, &g_out)?)))
                } else {
                    let pose = forward_kinematics(self.skeleton, angles, &bones, root)?;
                    self.fk_evaluations += 1;
                    let (loss, _) = loss_3d(&pose, gt_pose, &weights)?;
                    Ok((loss, None))
                }
            }
            BoneSupervision::Auto => unreachable!("resolved before training"),
        }
    }

    fn end_batch(&mut self, _batch_len: usize) -> Result<(), TrainingError> {
        Ok(())
    }

    fn fk_evaluations(&self) -> u64 {
        self.fk_evaluations
    }
}

/// Convenience: mean per-joint Euclidean error (cm) of FK with predicted
/// angles against the sample's camera-frame pose, using ground-truth bones
/// and origin. Used by overfit sanity checks and progress reporting.
pub fn mean_per_joint_error_cm<T: Real>(
    model: &MlpModel<T>,
    samples: &[Sample<T>],
    skeleton: &ValidatedSkeleton<T>,
) -> Result<T, TrainingError> {
    let mut total = T::zero();
    let mut count = 0usize;
    for sample in samples {
        let (out, _) = mlp_forward(model, &sample.input2d)?;
        let raw = RawAngles::new(out)?;
        let theta = constrain_angles(&raw, skeleton)?;
        let bones = sample.gt_bones.as_ref().ok_or(TrainingError::MissingSupervision {
            index: 0,
            what: "ground-truth bones",
        })?;
        let root = sample.root_cam.as_ref().ok_or(TrainingError::MissingSupervision {
            index: 0,
            what: "camera-frame root",
        })?;
        let gt = sample.gt_pose_cam.as_ref().ok_or(TrainingError::MissingSupervision {
            index: 0,
            what: "camera-frame pose",
        })?;
        let pose = forward_kinematics(skeleton, &theta, bones, root)?;
        for (p, g) in pose.positions.iter().zip(&gt.positions) {
            total += (p - g).norm();
            count += 1;
        }
    }
    Ok(total / real::<T>(count as f64))
}

/// Angles produced by the trained angle net for one input.
pub fn predict_angles<T: Real>(
    model: &MlpModel<T>,
    input2d: &[T],
    skeleton: &ValidatedSkeleton<T>,
) -> Result<JointAngles<T>, TrainingError> {
    let (out, _) = mlp_forward(model, input2d)?;
    Ok(constrain_angles(&RawAngles::new(out)?, skeleton)?)
}
