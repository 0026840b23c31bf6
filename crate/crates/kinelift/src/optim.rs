//! Adam optimizer, central-difference gradient oracle, and the
//! gradient-descent multiview inverse-kinematics fitter that manufactures
//! ground-truth angles, bone lengths, and root translations from calibrated
//! 2D observations.
//!
//! IK optimizes unconstrained re-parameterized variables: angles through the
//! logit of their normalized range coordinate, bone lengths through their
//! logarithm. Limits and positivity therefore hold at every iterate by
//! construction rather than by projection.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{CameraModel, Keypoints2D};
use crate::evaluation::rotation_between_vector_sets;
use crate::kinematics::{
    fk_with_jacobian, Frame, JointAngles, KinematicsError, Pose3D, RawAngles, RootPose,
};
use crate::nn::{logit, sigmoid};
use crate::objectives::{loss_3d, loss_3d_squared, loss_reprojection_mode, ResidualMode};
use crate::scalar::{real, Real};
use crate::skeleton::{BoneLengths, SkeletonError, ValidatedSkeleton};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("function value is not finite at probe {index}")]
    NonFiniteFunction { index: usize },
    #[error("IK problem has no views")]
    NoViews,
    #[error("IK diverged to a non-finite state at iteration {iteration}: {reason}")]
    DivergedNonFinite { iteration: usize, reason: String },
    #[error("view {view} observations have {got} points, skeleton has {expected} joints")]
    ObservationCountMismatch {
        view: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("objective failed: {0}")]
    Objective(String),
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> AdamParams<T> {
    pub fn with_lr(lr: T) -> Self {
        Self {
            lr,
            beta1: real(0.9),
            beta2: real(0.999),
            epsilon: real(1e-8),
        }
    }
}

impl<T: Real> Default for AdamParams<T> {
    fn default() -> Self {
        Self::with_lr(real(1e-3))
    }
}

/// Optimizer state: first/second moment estimates and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub params: AdamParams<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(dim: usize, params: AdamParams<T>) -> Self {
        Self {
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            step: 0,
            params,
        }
    }
}

/// One bias-corrected Adam update, in place:
/// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`,
/// `x -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::LengthMismatch {
            expected: params.len(),
            got: grads.len().min(state.m.len()),
        });
    }
    state.step += 1;
    let h = state.params;
    let t = state.step as i32;
    let bias1 = T::one() - h.beta1.powi(t);
    let bias2 = T::one() - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (T::one() - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (T::one() - h.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    Ok(())
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn numerical_gradient<T, F>(mut f: F, x: &[T], eps: T) -> Result<Vec<T>, OptimError>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    let two = real::<T>(2.0);
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        if !hi.is_finite_real() || !lo.is_finite_real() {
            return Err(OptimError::NonFiniteFunction { index: i });
        }
        grad.push((hi - lo) / (two * eps));
    }
    Ok(grad)
}

/// One calibrated view: camera plus the observed keypoints for a frame.
#[derive(Debug, Clone)]
pub struct IkView<T> {
    pub camera: CameraModel<T>,
    pub observations: Keypoints2D<T>,
}

/// Which parameter groups the fit is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IkFlags {
    pub angles: bool,
    pub bones: bool,
    pub translation: bool,
}

impl Default for IkFlags {
    fn default() -> Self {
        Self {
            angles: true,
            bones: true,
            translation: true,
        }
    }
}

/// A single-frame multiview IK problem in the world frame.
#[derive(Debug, Clone)]
pub struct IkProblem<'a, T> {
    pub skeleton: &'a ValidatedSkeleton<T>,
    pub views: Vec<IkView<T>>,
    /// Known bone lengths; used as the starting point (and kept fixed when
    /// `optimize.bones` is off).
    pub known_bones: Option<BoneLengths<T>>,
    /// Optional triangulated 3D targets (world frame) adding a 3D residual.
    pub target_pose: Option<Pose3D<T>>,
    pub optimize: IkFlags,
}

impl<'a, T: Real> IkProblem<'a, T> {
    pub fn new(skeleton: &'a ValidatedSkeleton<T>, views: Vec<IkView<T>>) -> Self {
        Self {
            skeleton,
            views,
            known_bones: None,
            target_pose: None,
            optimize: IkFlags::default(),
        }
    }

    fn validate(&self) -> Result<(), OptimError> {
        if self.views.is_empty() {
            return Err(OptimError::NoViews);
        }
        for (view, v) in self.views.iter().enumerate() {
            if v.observations.len() != self.skeleton.n_joints() {
                return Err(OptimError::ObservationCountMismatch {
                    view,
                    expected: self.skeleton.n_joints(),
                    got: v.observations.len(),
                });
            }
        }
        Ok(())
    }
}

/// Fit configuration. The residual mode applies to the optimization
/// objective only; reported pixel errors are always plain distances.
#[derive(Debug, Clone)]
pub struct IkConfig<T> {
    pub max_iters: usize,
    pub lr: T,
    /// Final learning rate of the exponential decay schedule; set equal to
    /// `lr` for a constant rate.
    pub lr_end: T,
    /// Minimum loss improvement that counts as progress.
    pub tolerance: T,
    /// Consecutive no-progress iterations before stopping.
    pub patience: usize,
    pub residual: ResidualMode,
    /// Extra restarts from a perturbed start if the fit lands above
    /// `restart_px_threshold` mean reprojection error.
    pub restarts: usize,
    pub restart_px_threshold: T,
}

impl<T: Real> Default for IkConfig<T> {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            lr: real(1e-2),
            lr_end: real(1e-4),
            tolerance: real(1e-7),
            patience: 200,
            residual: ResidualMode::Squared,
            restarts: 2,
            restart_px_threshold: real(1.0),
        }
    }
}

impl<T: Real> IkConfig<T> {
    fn lr_at(&self, iteration: usize) -> T {
        if self.lr_end == self.lr || self.max_iters <= 1 {
            return self.lr;
        }
        let progress = real::<T>(iteration as f64 / (self.max_iters - 1) as f64);
        self.lr * (self.lr_end / self.lr).powf(progress)
    }
}

/// Starting point of a fit, in constrained coordinates.
#[derive(Debug, Clone)]
pub struct IkInit<T> {
    pub raw_angles: RawAngles<T>,
    pub bones: BoneLengths<T>,
    pub translation: Vector3<T>,
}

/// Recovered parameters and diagnostics.
#[derive(Debug, Clone)]
pub struct IkSolution<T> {
    pub angles: JointAngles<T>,
    pub bones: BoneLengths<T>,
    /// World-frame root pose (identity extra rotation; the orientation lives
    /// in the root's three angle DoF).
    pub root: RootPose<T>,
    pub final_loss: T,
    /// Mean Euclidean reprojection error in pixels, averaged over views.
    pub final_reproj_px: T,
    pub iterations: usize,
    pub loss_history: Vec<T>,
}

/// Nearest point to the pixel rays of `uv` across views (linear
/// least-squares triangulation). `None` with fewer than two views.
pub fn triangulate_point<T: Real>(
    views: &[(&CameraModel<T>, Vector2<T>)],
) -> Option<Vector3<T>> {
    if views.len() < 2 {
        return None;
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (cam, uv) in views {
        let k = cam.k();
        // Back-project the pixel to a camera-frame direction.
        let y = (uv.y - k[(1, 2)]) / k[(1, 1)];
        let x = (uv.x - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        let dir_cam = Vector3::new(x, y, T::one());
        let dir = (cam.r().transpose() * dir_cam).normalize();
        let center = -(cam.r().transpose() * cam.t());
        let proj = Matrix3::identity() - dir * dir.transpose();
        a += proj;
        b += proj * center;
    }
    a.lu().solve(&b)
}

/// Deterministic default start.
///
/// With two or more views every joint is triangulated: bone lengths come
/// from triangulated inter-joint distances, the root translation from the
/// triangulated root, and the root orientation from aligning the root's
/// rest bone directions to the triangulated ones (non-root angles start at
/// their range midpoints). With a single view the root is back-projected at
/// a nominal depth and bone lengths are estimated from 2D pixel distances.
pub fn default_init<T: Real>(problem: &IkProblem<'_, T>) -> Result<IkInit<T>, OptimError> {
    problem.validate()?;
    let skeleton = problem.skeleton;

    if problem.views.len() >= 2 {
        let triangulated: Vec<Vector3<T>> = (0..skeleton.n_joints())
            .map(|j| {
                let obs: Vec<(&CameraModel<T>, Vector2<T>)> = problem
                    .views
                    .iter()
                    .map(|v| (&v.camera, v.observations.points()[j]))
                    .collect();
                triangulate_point(&obs)
            })
            .collect::<Option<Vec<_>>>()
            .ok_or(OptimError::NoViews)?;

        let translation = triangulated[0];

        let bones = if let Some(known) = &problem.known_bones {
            known.clone()
        } else {
            BoneLengths::new(
                skeleton
                    .edges()
                    .map(|(child, parent)| {
                        (triangulated[child] - triangulated[parent])
                            .norm()
                            .clamp(real(0.5), real(200.0))
                    })
                    .collect(),
            )?
        };

        let raw = seed_angles_from_points(skeleton, &triangulated);
        return Ok(IkInit {
            raw_angles: RawAngles::new(raw).expect("raw init stays in [0, 1]"),
            bones,
            translation,
        });
    }

    // Monocular fallback: back-project the root pixel at a nominal 100 cm
    // depth (monocular depth is unconstrained anyway).
    let view = &problem.views[0];
    let uv = view.observations.points()[0];
    let k = view.camera.k();
    let y = (uv.y - k[(1, 2)]) / k[(1, 1)];
    let x = (uv.x - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
    let depth = real::<T>(100.0);
    let p_cam = Vector3::new(x * depth, y * depth, depth);
    let translation = view.camera.r().transpose() * (p_cam - view.camera.t());

    let bones = if let Some(known) = &problem.known_bones {
        known.clone()
    } else {
        let mut lengths = Vec::with_capacity(skeleton.n_bones());
        for (child, parent) in skeleton.edges() {
            let conf = view.observations.confidence();
            let estimate = if conf[child].is_zero() || conf[parent].is_zero() {
                real(20.0)
            } else {
                let px =
                    (view.observations.points()[child] - view.observations.points()[parent]).norm();
                let z = (view.camera.r() * translation + view.camera.t()).z;
                px * z / view.camera.k()[(0, 0)]
            };
            lengths.push(estimate.clamp(real(1.0), real(100.0)));
        }
        BoneLengths::new(lengths)?
    };

    Ok(IkInit {
        raw_angles: RawAngles::midpoints(skeleton.total_dof()),
        bones,
        translation,
    })
}


/// Seeds every joint's raw angles so that forward kinematics tracks the
/// given 3D joint positions as closely as the DoF allow.
///
/// Under `p_i = R_i o_i + p_j` a bone's direction depends on both endpoint
/// joints, so no single top-down pass can decompose the pose exactly.
/// Instead this runs a few breadth-first coordinate-descent sweeps: each
/// joint's angles are re-solved by a deterministic shrinking grid search
/// against the observed directions of its own bone and its children's bones
/// (holding the rest of the tree fixed), which converges to a close seed for
/// the subsequent gradient-based fit.
fn seed_angles_from_points<T: Real>(
    skeleton: &ValidatedSkeleton<T>,
    points: &[Vector3<T>],
) -> Vec<T> {
    seed_angles_with_passes(skeleton, points, 4)
}

fn seed_angles_with_passes<T: Real>(
    skeleton: &ValidatedSkeleton<T>,
    points: &[Vector3<T>],
    passes: usize,
) -> Vec<T> {
    let n = skeleton.n_joints();
    let lo = skeleton.dof_min_rad();
    let hi = skeleton.dof_max_rad();
    let total_dof = skeleton.total_dof();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (child, parent) in skeleton.edges() {
        children[parent].push(child);
    }

    // Observed unit bone directions, indexed by the child joint.
    let observed: Vec<Vector3<T>> = (0..n)
        .map(|i| match skeleton.joint(i).parent {
            Some(p) => {
                let d = points[i] - points[p];
                let norm = d.norm();
                if norm > T::zero() {
                    d / norm
                } else {
                    skeleton.joint(i).rest_direction
                }
            }
            None => Vector3::zeros(),
        })
        .collect();

    let margin = real::<T>(1e-3);
    let mut raw = vec![real::<T>(0.5); total_dof];
    let local_rotation = |raw: &[T], i: usize| {
        let joint = skeleton.joint(i);
        let k = joint.dof.len();
        let offset = joint.dof_offset;
        let angles: Vec<T> = (0..k)
            .map(|t| {
                let v = raw[offset + t];
                lo[offset + t] * (T::one() - v) + hi[offset + t] * v
            })
            .collect();
        crate::kinematics::euler_to_rotation(&angles, &skeleton.dof_axes()[offset..offset + k])
    };

    for _pass in 0..passes {
        let mut globals: Vec<Matrix3<T>> = Vec::with_capacity(n);
        for i in 0..n {
            let joint = skeleton.joint(i);
            let k = joint.dof.len();
            let offset = joint.dof_offset;
            let parent_rot = joint.parent.map_or_else(Matrix3::identity, |p| globals[p]);

            if k > 0 {
                // Residual targets seen from the parent frame: this joint's
                // own bone plus its children's bones with their current
                // local rotations.
                let mut rest_dirs: Vec<Vector3<T>> = Vec::new();
                let mut target_dirs: Vec<Vector3<T>> = Vec::new();
                if joint.parent.is_some() {
                    rest_dirs.push(joint.rest_direction);
                    target_dirs.push(parent_rot.transpose() * observed[i]);
                }
                for &c in &children[i] {
                    let child_local = local_rotation(&raw, c);
                    rest_dirs.push(child_local * skeleton.joint(c).rest_direction);
                    target_dirs.push(parent_rot.transpose() * observed[c]);
                }
                if !rest_dirs.is_empty() {
                    let axes = &skeleton.dof_axes()[offset..offset + k];
                    // The root's full-range XYZ triple has a closed form:
                    // best rotation by Kabsch, then a canonical-branch Euler
                    // extraction. Grid search there risks seeding the wrong
                    // Euler branch, a local minimum the fit cannot leave.
                    let closed_form = if joint.parent.is_none()
                        && k == 3
                        && rest_dirs.len() >= 2
                    {
                        crate::evaluation::rotation_between_vector_sets(&rest_dirs, &target_dirs)
                            .ok()
                            .map(|r0| {
                                let euler = crate::kinematics::euler_xyz_from_rotation(&r0);
                                (0..3)
                                    .map(|t| {
                                        (euler[t] - lo[offset + t])
                                            / (hi[offset + t] - lo[offset + t])
                                    })
                                    .collect::<Vec<T>>()
                            })
                    } else {
                        None
                    };
                    let best = closed_form.unwrap_or_else(|| {
                        grid_refine_angles(
                            axes,
                            &lo[offset..offset + k],
                            &hi[offset..offset + k],
                            &rest_dirs,
                            &target_dirs,
                        )
                    });
                    for (t, &v) in best.iter().enumerate() {
                        raw[offset + t] = v.clamp(margin, T::one() - margin);
                    }
                }
            }
            globals.push(parent_rot * local_rotation(&raw, i));
        }
    }
    raw
}

/// Deterministic shrinking grid search over a joint's raw angles minimizing
/// the squared mismatch between rotated rest directions and target
/// directions.
fn grid_refine_angles<T: Real>(
    axes: &[crate::skeleton::Axis],
    lo: &[T],
    hi: &[T],
    rest: &[Vector3<T>],
    targets: &[Vector3<T>],
) -> Vec<T> {
    let k = axes.len();
    let cost = |raw: &[T]| {
        let angles: Vec<T> = (0..k)
            .map(|t| lo[t] * (T::one() - raw[t]) + hi[t] * raw[t])
            .collect();
        let r = crate::kinematics::euler_to_rotation(&angles, axes);
        rest.iter()
            .zip(targets)
            .fold(T::zero(), |acc, (d, g)| acc + (r * d - g).norm_squared())
    };

    let mut center = vec![real::<T>(0.5); k];
    let mut span = real::<T>(0.5);
    for round in 0..9 {
        let steps: i32 = if round == 0 { 4 } else { 2 };
        let mut best = center.clone();
        let mut best_cost = cost(&center);
        let mut index = vec![-steps; k];
        loop {
            let candidate: Vec<T> = (0..k)
                .map(|t| {
                    (center[t] + span * real::<T>(index[t] as f64 / steps as f64))
                        .clamp(T::zero(), T::one())
                })
                .collect();
            let c = cost(&candidate);
            if c < best_cost {
                best_cost = c;
                best = candidate;
            }
            // Advance the mixed-radix counter over the grid.
            let mut dim = 0;
            loop {
                if dim == k {
                    break;
                }
                index[dim] += 1;
                if index[dim] <= steps {
                    break;
                }
                index[dim] = -steps;
                dim += 1;
            }
            if dim == k {
                break;
            }
        }
        center = best;
        span *= real(0.4);
    }
    center
}

/// Fits angles, bone lengths, and root translation to the observations by
/// Adam on the re-parameterized objective. Deterministic given the init and
/// config.
///
/// With two or more views, a warm-up phase first drives the pose onto
/// triangulated 3D joint targets; the final fit always minimizes the
/// per-view reprojection objective (plus the problem's own 3D term when one
/// is supplied).
pub fn ik_fit<T: Real>(
    problem: &IkProblem<'_, T>,
    init: &IkInit<T>,
    config: &IkConfig<T>,
) -> Result<IkSolution<T>, OptimError> {
    problem.validate()?;
    let warmed = warm_start(problem, init, config)?;
    let mut best = run_single_fit(problem, &warmed, config)?;
    if best.final_reproj_px > config.restart_px_threshold {
        // Deterministic perturbed restarts for fits stuck in a poor basin.
        for attempt in 0..config.restarts {
            let mut rng = ChaCha8Rng::seed_from_u64(attempt as u64 + 1);
            let perturbed = RawAngles::new(
                warmed
                    .raw_angles
                    .values()
                    .iter()
                    .map(|&v| {
                        let jitter = real::<T>(rng.random_range(-0.3..0.3));
                        (v + jitter).clamp(real(0.02), real(0.98))
                    })
                    .collect(),
            )
            .expect("perturbed raw angles stay in (0, 1)");
            let retry_init = IkInit {
                raw_angles: perturbed,
                bones: warmed.bones.clone(),
                translation: warmed.translation,
            };
            let candidate = run_single_fit(problem, &retry_init, config)?;
            if candidate.final_loss < best.final_loss {
                best = candidate;
            }
            if best.final_reproj_px <= config.restart_px_threshold {
                break;
            }
        }
    }
    Ok(best)
}

/// Pre-fit against triangulated joint positions with damped Gauss-Newton
/// steps; identity when fewer than two views are available.
fn warm_start<T: Real>(
    problem: &IkProblem<'_, T>,
    init: &IkInit<T>,
    config: &IkConfig<T>,
) -> Result<IkInit<T>, OptimError> {
    if problem.views.len() < 2 {
        // Monocular: refine the init against the pixel residuals directly
        // (damping handles the depth-direction rank deficiency). A start
        // that cannot be linearized is used as-is.
        return Ok(
            match levenberg_marquardt_refine(problem, init, &LmResiduals::Reprojection, 400, false)
            {
                Ok((refined, _)) => refined,
                Err(_) => init.clone(),
            },
        );
    }
    let triangulated: Option<Vec<Vector3<T>>> = (0..problem.skeleton.n_joints())
        .map(|j| {
            let obs: Vec<(&CameraModel<T>, Vector2<T>)> = problem
                .views
                .iter()
                .map(|v| (&v.camera, v.observations.points()[j]))
                .collect();
            triangulate_point(&obs)
        })
        .collect();
    let Some(points) = triangulated else {
        return Ok(init.clone());
    };
    let target = Pose3D {
        frame: Frame::World,
        positions: points,
    };
    let _ = config;

    // When the root carries two or more rigid (0-DoF) children, their
    // observed directions pin the root rotation exactly; solving it in
    // closed form and freezing it during the warm refinement removes the
    // root/hip compensation family entirely.
    let skeleton = problem.skeleton;
    let rigid_children: Vec<usize> = skeleton
        .edges()
        .filter(|&(child, parent)| parent == 0 && skeleton.joint(child).dof.is_empty())
        .map(|(child, _)| child)
        .collect();
    let mut init = init.clone();
    let mut freeze_root = false;
    if rigid_children.len() >= 2 {
        let rest: Vec<Vector3<T>> = rigid_children
            .iter()
            .map(|&c| skeleton.joint(c).rest_direction)
            .collect();
        let observed: Vec<Vector3<T>> = rigid_children
            .iter()
            .map(|&c| (target.positions[c] - target.positions[0]).normalize())
            .collect();
        if let Ok(r0) = rotation_between_vector_sets(&rest, &observed) {
            let euler = crate::kinematics::euler_xyz_from_rotation(&r0);
            let lo = skeleton.dof_min_rad();
            let hi = skeleton.dof_max_rad();
            let mut raw = init.raw_angles.values().to_vec();
            for t in 0..3 {
                raw[t] = ((euler[t] - lo[t]) / (hi[t] - lo[t])).clamp(real(1e-6), T::one() - real(1e-6));
            }
            init.raw_angles = RawAngles::new(raw).expect("root raw stays in [0, 1]");
            init.translation = target.positions[0];
            freeze_root = true;
        }
    }

    let (mut best, mut best_cost) =
        levenberg_marquardt_refine(problem, &init, &LmResiduals::Positions(&target), 400, freeze_root)?;
    // The damped Gauss-Newton refinement occasionally lands in a twist-
    // compensation minimum; deterministic jittered re-seeds are cheap and
    // almost always recover the zero-residual decomposition.
    let converged = real::<T>(1e-16);
    if best_cost > converged {
        let mut rng = ChaCha8Rng::seed_from_u64(0xB0E5);
        for attempt in 0..48 {
            // Widen the jitter as attempts fail; every fourth start is drawn
            // fresh over the whole raw-angle cube.
            let scale = 0.1 + 0.02 * attempt as f64;
            let raw_angles = RawAngles::new(
                init.raw_angles
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(slot, &v)| {
                        if freeze_root && slot < 3 {
                            v
                        } else if attempt % 4 == 3 {
                            real::<T>(rng.random_range(0.05..0.95))
                        } else {
                            let jitter = real::<T>(rng.random_range(-scale..scale));
                            (v + jitter).clamp(real(0.01), real(0.99))
                        }
                    })
                    .collect(),
            )
            .expect("jittered raw angles stay in (0, 1)");
            let jittered = IkInit {
                raw_angles,
                bones: init.bones.clone(),
                translation: init.translation,
            };
            let (candidate, cost) =
                levenberg_marquardt_refine(problem, &jittered, &LmResiduals::Positions(&target), 400, freeze_root)?;
            if cost < best_cost {
                best = candidate;
                best_cost = cost;
            }
            if best_cost <= converged {
                break;
            }
        }
    }
    Ok(best)
}

/// Levenberg-Marquardt on the position residuals `FK(params) - target`,
/// in the same unconstrained parameterization as the main fit. Quadratic
/// local convergence makes this a reliable basin-finder before the
/// gradient-based reprojection fit.
/// Residuals a warm refinement can minimize.
enum LmResiduals<'t, T> {
    /// Stacked `FK - target` position residuals (3 per joint).
    Positions(&'t Pose3D<T>),
    /// Stacked per-view pixel residuals (2 per joint per view).
    Reprojection,
}

fn levenberg_marquardt_refine<T: Real>(
    problem: &IkProblem<'_, T>,
    init: &IkInit<T>,
    residuals: &LmResiduals<'_, T>,
    max_iters: usize,
    freeze_root: bool,
) -> Result<(IkInit<T>, T), OptimError> {
    use nalgebra::{DMatrix, DVector};

    let skeleton = problem.skeleton;
    let total_dof = skeleton.total_dof();
    let n_bones = skeleton.n_bones();
    let n_joints = skeleton.n_joints();
    let n_params = total_dof + n_bones + 3;
    let n_rows = match residuals {
        LmResiduals::Positions(_) => 3 * n_joints,
        LmResiduals::Reprojection => 2 * n_joints * problem.views.len(),
    };
    let lo = skeleton.dof_min_rad();
    let hi = skeleton.dof_max_rad();

    let mut params: Vec<T> = Vec::with_capacity(n_params);
    params.extend(init.raw_angles.values().iter().map(|&v| {
        // Keep the start finite even for raw angles exactly at 0 or 1.
        logit(v.clamp(real(1e-12), T::one() - real(1e-12)))
    }));
    params.extend(init.bones.values().iter().map(|&v| v.ln()));
    params.extend(init.translation.iter().copied());

    // Residuals and the reparameterized Jacobian at `params`.
    let linearize = |params: &[T]| -> Result<(DVector<T>, DMatrix<T>, T), OptimError> {
        let (angles, bones, translation) = decode(params, total_dof, n_bones, lo, hi);
        let root = RootPose {
            rotation: Vector3::zeros(),
            translation,
            frame: Frame::World,
        };
        let (fk, jac) = fk_with_jacobian(skeleton, &angles, &bones, &root)?;
        let mut r = DVector::zeros(n_rows);
        let mut jm = DMatrix::zeros(n_rows, n_params);
        match residuals {
            LmResiduals::Positions(target) => {
                for (j, (p, q)) in fk.pose.positions.iter().zip(&target.positions).enumerate() {
                    for c in 0..3 {
                        r[3 * j + c] = p[c] - q[c];
                    }
                }
                jm.copy_from(jac.matrix());
            }
            LmResiduals::Reprojection => {
                for (v, view) in problem.views.iter().enumerate() {
                    let rot = view.camera.r();
                    for j in 0..n_joints {
                        let p_cam = rot * fk.pose.positions[j] + view.camera.t();
                        if !(p_cam.z > T::zero()) {
                            return Err(OptimError::DivergedNonFinite {
                                iteration: 0,
                                reason: format!("joint {j} behind camera {v}"),
                            });
                        }
                        let (uv, pixel_jac) =
                            crate::camera::project_point_with_jacobian(&p_cam, &view.camera);
                        let row = 2 * (v * n_joints + j);
                        let obs = view.observations.points()[j];
                        r[row] = uv.x - obs.x;
                        r[row + 1] = uv.y - obs.y;
                        // d(uv)/d params = d(uv)/dX_cam * R_v * d p_j / d params.
                        let m = pixel_jac * rot;
                        for col in 0..n_params {
                            for out in 0..2 {
                                let mut acc = T::zero();
                                for c in 0..3 {
                                    acc += m[(out, c)] * jac.entry(j, c, col);
                                }
                                jm[(row + out, col)] = acc;
                            }
                        }
                    }
                }
            }
        }
        for col in 0..n_params {
            let chain = if col < total_dof {
                if !problem.optimize.angles || (freeze_root && col < 3) {
                    T::zero()
                } else {
                    let raw = sigmoid(params[col]);
                    (hi[col] - lo[col]) * raw * (T::one() - raw)
                }
            } else if col < total_dof + n_bones {
                if !problem.optimize.bones {
                    T::zero()
                } else {
                    bones.values()[col - total_dof]
                }
            } else if !problem.optimize.translation || freeze_root {
                T::zero()
            } else {
                T::one()
            };
            for row in 0..n_rows {
                jm[(row, col)] *= chain;
            }
        }
        let cost = r.norm_squared();
        Ok((r, jm, cost))
    };

    let (mut r, mut jm, mut cost) = linearize(&params)?;
    let mut lambda = real::<T>(1e-3);
    let floor = real::<T>(1e-12);
    for _ in 0..max_iters {
        if cost < real(1e-20) {
            break;
        }
        let jtj = jm.tr_mul(&jm);
        let jtr = jm.tr_mul(&r);
        let mut stepped = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for d in 0..n_params {
                a[(d, d)] += lambda * (jtj[(d, d)] + floor);
            }
            if let Some(chol) = a.cholesky() {
                let delta = chol.solve(&(-&jtr));
                let candidate: Vec<T> =
                    params.iter().zip(delta.iter()).map(|(&p, &d)| p + d).collect();
                if candidate.iter().all(|v| v.is_finite_real()) {
                    if let Ok((r2, j2, cost2)) = linearize(&candidate) {
                        if cost2 < cost {
                            params = candidate;
                            r = r2;
                            jm = j2;
                            cost = cost2;
                            lambda = (lambda / real(3.0)).max(real(1e-12));
                            stepped = true;
                            break;
                        }
                    }
                }
            }
            lambda *= real(10.0);
            if lambda > real(1e12) {
                break;
            }
        }
        if !stepped {
            break;
        }
    }

    let (angles, bones, translation) = decode(&params, total_dof, n_bones, lo, hi);
    Ok((
        IkInit {
            raw_angles: crate::kinematics::unconstrain_angles(&angles, skeleton)?,
            bones,
            translation,
        },
        cost,
    ))
}

fn run_single_fit<T: Real>(
    problem: &IkProblem<'_, T>,
    init: &IkInit<T>,
    config: &IkConfig<T>,
) -> Result<IkSolution<T>, OptimError> {
    let skeleton = problem.skeleton;
    let total_dof = skeleton.total_dof();
    let n_bones = skeleton.n_bones();
    let n_params = total_dof + n_bones + 3;
    let lo = skeleton.dof_min_rad();
    let hi = skeleton.dof_max_rad();

    if init.raw_angles.len() != total_dof {
        return Err(OptimError::LengthMismatch {
            expected: total_dof,
            got: init.raw_angles.len(),
        });
    }
    if init.bones.len() != n_bones {
        return Err(OptimError::LengthMismatch {
            expected: n_bones,
            got: init.bones.len(),
        });
    }

    // Unconstrained parameter vector: [logit(raw) | ln(bones) | translation].
    let mut params: Vec<T> = Vec::with_capacity(n_params);
    params.extend(init.raw_angles.values().iter().map(|&v| {
        // Keep the start finite even for raw angles exactly at 0 or 1.
        logit(v.clamp(real(1e-12), T::one() - real(1e-12)))
    }));
    params.extend(init.bones.values().iter().map(|&v| v.ln()));
    params.extend(init.translation.iter().copied());

    let mut state = AdamState::new(n_params, AdamParams::with_lr(config.lr));
    let mut history = Vec::with_capacity(config.max_iters);
    let mut best_loss = T::max_value().expect("bounded scalar");
    let mut best_params = params.clone();
    let mut stale = 0usize;
    let mut iterations = 0usize;

    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let (loss, grad) = evaluate(problem, &params, config.residual, iter)?;
        history.push(loss);

        if loss < best_loss - config.tolerance {
            best_loss = loss;
            best_params.copy_from_slice(&params);
            stale = 0;
        } else {
            if loss < best_loss {
                best_loss = loss;
                best_params.copy_from_slice(&params);
            }
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }

        let mut masked = grad;
        if !problem.optimize.angles {
            masked[..total_dof].fill(T::zero());
        }
        if !problem.optimize.bones {
            masked[total_dof..total_dof + n_bones].fill(T::zero());
        }
        if !problem.optimize.translation {
            masked[total_dof + n_bones..].fill(T::zero());
        }
        state.params.lr = config.lr_at(iter);
        adam_step(&mut params, &masked, &mut state)?;
        if params.iter().any(|p| !p.is_finite_real()) {
            return Err(OptimError::DivergedNonFinite {
                iteration: iter,
                reason: "parameter vector".into(),
            });
        }
    }

    // Decode the best iterate and report its plain pixel error.
    let (angles, bones, translation) = decode(&best_params, total_dof, n_bones, lo, hi);
    let root = RootPose {
        rotation: Vector3::zeros(),
        translation,
        frame: Frame::World,
    };
    let (fk, _) = fk_with_jacobian(skeleton, &angles, &bones, &root)?;
    let mut px = T::zero();
    for view in &problem.views {
        let pose_cam = crate::camera::world_to_camera(&fk.pose, &view.camera)
            .map_err(|e| OptimError::Objective(e.to_string()))?;
        let (l, _) =
            loss_reprojection_mode(&pose_cam, &view.camera, &view.observations, ResidualMode::Euclidean)
                .map_err(|e| OptimError::Objective(e.to_string()))?;
        px += l;
    }
    px /= real(problem.views.len() as f64);

    Ok(IkSolution {
        angles,
        bones,
        root,
        final_loss: best_loss,
        final_reproj_px: px,
        iterations,
        loss_history: history,
    })
}

fn decode<T: Real>(
    params: &[T],
    total_dof: usize,
    n_bones: usize,
    lo: &[T],
    hi: &[T],
) -> (JointAngles<T>, BoneLengths<T>, Vector3<T>) {
    let angles = JointAngles::new(
        (0..total_dof)
            .map(|i| {
                let raw = sigmoid(params[i]);
                (lo[i] * (T::one() - raw) + hi[i] * raw).clamp(lo[i], hi[i])
            })
            .collect(),
    );
    // Clamp the log-length so probing steps can neither underflow to a zero
    // length nor overflow to infinity.
    let log_bound = real::<T>(13.8); // lengths stay within [1e-6, 1e6] cm
    let bones = BoneLengths::new(
        params[total_dof..total_dof + n_bones]
            .iter()
            .map(|&w| w.clamp(-log_bound, log_bound).exp())
            .collect(),
    )
    .expect("clamped exp is positive and finite");
    let translation = Vector3::new(
        params[total_dof + n_bones],
        params[total_dof + n_bones + 1],
        params[total_dof + n_bones + 2],
    );
    (angles, bones, translation)
}

/// Objective and gradient at `params`: summed per-view reprojection residuals
/// (plus the optional 3D term), pulled back through FK and the
/// re-parameterization.
fn evaluate<T: Real>(
    problem: &IkProblem<'_, T>,
    params: &[T],
    residual: ResidualMode,
    iteration: usize,
) -> Result<(T, Vec<T>), OptimError> {
    let skeleton = problem.skeleton;
    let total_dof = skeleton.total_dof();
    let n_bones = skeleton.n_bones();
    let lo = skeleton.dof_min_rad();
    let hi = skeleton.dof_max_rad();

    let (angles, bones, translation) = decode(params, total_dof, n_bones, lo, hi);
    let root = RootPose {
        rotation: Vector3::zeros(),
        translation,
        frame: Frame::World,
    };
    let (fk, jac) = fk_with_jacobian(skeleton, &angles, &bones, &root)?;

    let mut loss = T::zero();
    let mut g_world = vec![Vector3::<T>::zeros(); skeleton.n_joints()];
    let add_target = |target: &Pose3D<T>,
                      loss: &mut T,
                      g_world: &mut Vec<Vector3<T>>|
     -> Result<(), OptimError> {
        let weights = vec![T::one(); skeleton.n_joints()];
        let (l, g) = match residual {
            ResidualMode::Euclidean => loss_3d(&fk.pose, target, &weights),
            ResidualMode::Squared => loss_3d_squared(&fk.pose, target, &weights),
        }
        .map_err(|e| OptimError::Objective(e.to_string()))?;
        *loss += l;
        for (acc, gi) in g_world.iter_mut().zip(&g) {
            *acc += gi;
        }
        Ok(())
    };

    for view in &problem.views {
        let pose_cam = crate::camera::world_to_camera(&fk.pose, &view.camera)
            .map_err(|e| OptimError::Objective(e.to_string()))?;
        let (l, g_cam) =
            loss_reprojection_mode(&pose_cam, &view.camera, &view.observations, residual)
                .map_err(|e| OptimError::DivergedNonFinite {
                    iteration,
                    reason: e.to_string(),
                })?;
        loss += l;
        let rt = view.camera.r().transpose();
        for (acc, g) in g_world.iter_mut().zip(&g_cam) {
            *acc += rt * g;
        }
    }
    if let Some(target) = &problem.target_pose {
        add_target(target, &mut loss, &mut g_world)?;
    }
    if !loss.is_finite_real() {
        return Err(OptimError::DivergedNonFinite {
            iteration,
            reason: "loss".into(),
        });
    }

    let pulled = jac.vjp(&g_world);
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..total_dof {
        let raw = sigmoid(params[i]);
        let d_raw = raw * (T::one() - raw);
        grad.push(pulled[i] * (hi[i] - lo[i]) * d_raw);
    }
    for b in 0..n_bones {
        // d length / d w = exp(w) = length.
        grad.push(pulled[total_dof + b] * bones.values()[b]);
    }
    for c in 0..3 {
        grad.push(pulled[total_dof + n_bones + c]);
    }
    Ok((loss, grad))
}

/// Fits many independent frames in parallel, preserving input order.
pub fn ik_fit_batch<T: Real>(
    problems: &[IkProblem<'_, T>],
    inits: &[IkInit<T>],
    config: &IkConfig<T>,
) -> Vec<Result<IkSolution<T>, OptimError>> {
    use rayon::prelude::*;
    problems
        .par_iter()
        .zip(inits.par_iter())
        .map(|(problem, init)| ik_fit(problem, init, config))
        .collect()
}
