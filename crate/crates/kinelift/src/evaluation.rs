//! Kabsch-Umeyama point-set alignment and the per-joint position error
//! statistics (median, confidence-weighted mean, population standard
//! deviation) used to score predicted poses against ground truth.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose3D;
use crate::scalar::{real, Real};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("point sets are rank-deficient; rotation alignment needs rank >= 2")]
    DegenerateConfiguration,
    #[error("invalid alignment mode: {0}")]
    InvalidMode(String),
    #[error("no poses to evaluate")]
    EmptyInput,
}

/// Which degrees of freedom the alignment may use.
///
/// `root_only_translation` is the protocol that aligns the prediction to the
/// ground-truth root joint; it excludes rotation and scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMode {
    pub rotation: bool,
    pub translation: bool,
    pub scale: bool,
    pub root_only_translation: bool,
    /// Index of the root joint used by `root_only_translation`.
    #[serde(default)]
    pub root_index: usize,
    /// Bookkeeping flag: the evaluated poses were built with ground-truth
    /// bone lengths. Does not affect the alignment itself.
    #[serde(default)]
    pub use_gt_bones: bool,
}

impl AlignmentMode {
    pub fn rts() -> Self {
        Self {
            rotation: true,
            translation: true,
            scale: true,
            root_only_translation: false,
            root_index: 0,
            use_gt_bones: false,
        }
    }

    pub fn rt() -> Self {
        Self { scale: false, ..Self::rts() }
    }

    pub fn ts() -> Self {
        Self { rotation: false, ..Self::rts() }
    }

    pub fn t() -> Self {
        Self {
            rotation: false,
            scale: false,
            ..Self::rts()
        }
    }

    pub fn root() -> Self {
        Self {
            rotation: false,
            translation: true,
            scale: false,
            root_only_translation: true,
            root_index: 0,
            use_gt_bones: false,
        }
    }

    /// Parses the CLI names `Rts`, `ts`, `Rt`, `t`, `root`.
    pub fn parse(name: &str) -> Result<Self, EvalError> {
        match name {
            "Rts" => Ok(Self::rts()),
            "Rt" => Ok(Self::rt()),
            "ts" => Ok(Self::ts()),
            "t" => Ok(Self::t()),
            "root" => Ok(Self::root()),
            other => Err(EvalError::InvalidMode(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.root_only_translation && (self.rotation || self.scale) {
            return Err(EvalError::InvalidMode(
                "root-only translation excludes rotation and scale".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if self.root_only_translation {
            return "root".into();
        }
        let mut s = String::new();
        if self.rotation {
            s.push('R');
        }
        if self.translation {
            s.push('t');
        }
        if self.scale {
            s.push('s');
        }
        if s.is_empty() {
            s.push('-');
        }
        s
    }
}

/// A fitted similarity transform and the transformed source cloud.
#[derive(Debug, Clone)]
pub struct Alignment<T> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    pub scale: T,
    pub aligned: Pose3D<T>,
    /// Root-mean-square residual of `s R x + t` against the target.
    pub residual_rms: T,
}

const RANK_TOL: f64 = 1e-12;

/// Least-squares similarity alignment `min sum ||s R x_i + t - y_i||^2` with
/// the requested components enabled; disabled components stay at identity.
pub fn kabsch_umeyama<T: Real>(
    source: &Pose3D<T>,
    target: &Pose3D<T>,
    mode: AlignmentMode,
) -> Result<Alignment<T>, EvalError> {
    mode.validate()?;
    let n = source.n_joints();
    if n != target.n_joints() {
        return Err(EvalError::LengthMismatch {
            expected: target.n_joints(),
            got: n,
        });
    }
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    align_points(&source.positions, &target.positions, mode).map(|(r, t, s)| {
        let aligned_positions: Vec<Vector3<T>> =
            source.positions.iter().map(|x| r * x * s + t).collect();
        let mut sq = T::zero();
        for (a, y) in aligned_positions.iter().zip(&target.positions) {
            sq += (a - y).norm_squared();
        }
        let residual_rms = (sq / real(n as f64)).sqrt();
        Alignment {
            rotation: r,
            translation: t,
            scale: s,
            aligned: Pose3D {
                frame: target.frame,
                positions: aligned_positions,
            },
            residual_rms,
        }
    })
}

/// Best rotation taking `source` vectors onto `target` vectors about the
/// origin (no centering, no scale). Used to seed root orientations from
/// observed bone directions.
pub fn rotation_between_vector_sets<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> Result<Matrix3<T>, EvalError> {
    if source.len() != target.len() {
        return Err(EvalError::LengthMismatch {
            expected: target.len(),
            got: source.len(),
        });
    }
    let mut cov = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        cov += y * x.transpose();
    }
    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    if svd.singular_values[1].to_f64c() < RANK_TOL {
        return Err(EvalError::DegenerateConfiguration);
    }
    let mut s_diag = Vector3::new(T::one(), T::one(), T::one());
    if (u.determinant() * v_t.determinant()) < T::zero() {
        s_diag.z = -T::one();
    }
    Ok(u * Matrix3::from_diagonal(&s_diag) * v_t)
}

/// Core solve on raw point slices; returns `(R, t, s)`.
fn align_points<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
    mode: AlignmentMode,
) -> Result<(Matrix3<T>, Vector3<T>, T), EvalError> {
    let n = source.len();
    let inv_n = T::one() / real::<T>(n as f64);

    if mode.root_only_translation {
        let t = target[mode.root_index] - source[mode.root_index];
        return Ok((Matrix3::identity(), t, T::one()));
    }

    // Center the clouds only when translation is free to absorb the shift.
    let (mu_x, mu_y) = if mode.translation {
        let mut mx = Vector3::zeros();
        let mut my = Vector3::zeros();
        for (x, y) in source.iter().zip(target) {
            mx += x;
            my += y;
        }
        (mx * inv_n, my * inv_n)
    } else {
        (Vector3::zeros(), Vector3::zeros())
    };

    let mut rotation = Matrix3::identity();
    let mut scale = T::one();

    if mode.rotation {
        if n < 3 {
            return Err(EvalError::DegenerateConfiguration);
        }
        // Umeyama: covariance of target against source, SVD, sign-corrected.
        let mut cov = Matrix3::zeros();
        for (x, y) in source.iter().zip(target) {
            cov += (y - mu_y) * (x - mu_x).transpose();
        }
        cov *= inv_n;
        let svd = SVD::new(cov, true, true);
        let u = svd.u.expect("svd requested u");
        let v_t = svd.v_t.expect("svd requested v_t");
        let sv = svd.singular_values;
        if sv[1].to_f64c() < RANK_TOL {
            return Err(EvalError::DegenerateConfiguration);
        }
        let mut s_diag = Vector3::new(T::one(), T::one(), T::one());
        if (u.determinant() * v_t.determinant()) < T::zero() {
            s_diag.z = -T::one();
        }
        rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
        if mode.scale {
            let mut var_x = T::zero();
            for x in source {
                var_x += (x - mu_x).norm_squared();
            }
            var_x *= inv_n;
            let trace_ds = sv[0] * s_diag.x + sv[1] * s_diag.y + sv[2] * s_diag.z;
            scale = trace_ds / var_x;
        }
    } else if mode.scale {
        // Optimal scale with R = I: <x~, y~> / <x~, x~>.
        let mut num = T::zero();
        let mut den = T::zero();
        for (x, y) in source.iter().zip(target) {
            num += (x - mu_x).dot(&(y - mu_y));
            den += (x - mu_x).norm_squared();
        }
        if den.to_f64c() < RANK_TOL {
            return Err(EvalError::DegenerateConfiguration);
        }
        scale = num / den;
    }

    let translation = if mode.translation {
        mu_y - rotation * mu_x * scale
    } else {
        Vector3::zeros()
    };
    Ok((rotation, translation, scale))
}

/// Per-joint error statistics over a set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats<T> {
    pub median_cm: T,
    pub weighted_mean_cm: T,
    pub std_cm: T,
    pub n_joints: usize,
    pub n_frames: usize,
    /// Frames containing at least one zero-confidence detection.
    pub n_detection_failures: usize,
}

/// Aligns every frame independently per `mode`, collects per-joint Euclidean
/// distances in cm, and reports the median, the confidence-weighted mean
/// `sum(c e) / sum(c)`, and the population standard deviation.
///
/// Joints with zero confidence are counted as detection failures and are
/// excluded from the alignment and from all statistics.
pub fn per_joint_errors<T: Real>(
    pred: &[Pose3D<T>],
    gt: &[Pose3D<T>],
    confidences: Option<&[Vec<T>]>,
    mode: AlignmentMode,
) -> Result<ErrorStats<T>, EvalError> {
    let (stats, _) = per_joint_errors_detailed(pred, gt, confidences, mode)?;
    Ok(stats)
}

/// [`per_joint_errors`] also returning the per-frame, per-joint distances
/// (`None` where a joint was excluded as a detection failure).
pub fn per_joint_errors_detailed<T: Real>(
    pred: &[Pose3D<T>],
    gt: &[Pose3D<T>],
    confidences: Option<&[Vec<T>]>,
    mode: AlignmentMode,
) -> Result<(ErrorStats<T>, Vec<Vec<Option<T>>>), EvalError> {
    mode.validate()?;
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(conf) = confidences {
        if conf.len() != pred.len() {
            return Err(EvalError::LengthMismatch {
                expected: pred.len(),
                got: conf.len(),
            });
        }
    }

    let n_joints = gt[0].n_joints();
    let mut distances: Vec<T> = Vec::new();
    let mut weights: Vec<T> = Vec::new();
    let mut details: Vec<Vec<Option<T>>> = Vec::with_capacity(pred.len());
    let mut n_detection_failures = 0usize;

    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.n_joints() != n_joints || g.n_joints() != n_joints {
            return Err(EvalError::LengthMismatch {
                expected: n_joints,
                got: p.n_joints().min(g.n_joints()),
            });
        }
        let conf = confidences.map(|c| c[f].as_slice());
        if let Some(c) = conf {
            if c.len() != n_joints {
                return Err(EvalError::LengthMismatch {
                    expected: n_joints,
                    got: c.len(),
                });
            }
        }
        let valid: Vec<bool> = (0..n_joints)
            .map(|j| conf.is_none_or(|c| !c[j].is_zero()))
            .collect();
        if valid.iter().any(|&v| !v) {
            n_detection_failures += 1;
        }

        // Align on the valid correspondences only.
        let src: Vec<Vector3<T>> = (0..n_joints)
            .filter(|&j| valid[j])
            .map(|j| p.positions[j])
            .collect();
        let dst: Vec<Vector3<T>> = (0..n_joints)
            .filter(|&j| valid[j])
            .map(|j| g.positions[j])
            .collect();
        if src.is_empty() {
            details.push(vec![None; n_joints]);
            continue;
        }
        let (r, t, s) = if mode.root_only_translation && !valid[mode.root_index] {
            (Matrix3::identity(), Vector3::zeros(), T::one())
        } else if mode.root_only_translation {
            (
                Matrix3::identity(),
                g.positions[mode.root_index] - p.positions[mode.root_index],
                T::one(),
            )
        } else {
            align_points(&src, &dst, mode)?
        };

        let mut row = Vec::with_capacity(n_joints);
        for j in 0..n_joints {
            if valid[j] {
                let aligned = r * p.positions[j] * s + t;
                let d = (aligned - g.positions[j]).norm();
                distances.push(d);
                weights.push(conf.map_or(T::one(), |c| c[j]));
                row.push(Some(d));
            } else {
                row.push(None);
            }
        }
        details.push(row);
    }

    if distances.is_empty() {
        return Err(EvalError::EmptyInput);
    }

    let n = real::<T>(distances.len() as f64);
    let mut sorted = distances.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let median_cm = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) * real(0.5)
    };
    let weight_sum: T = weights.iter().copied().fold(T::zero(), |a, b| a + b);
    let weighted_sum: T = distances
        .iter()
        .zip(&weights)
        .fold(T::zero(), |acc, (&d, &w)| acc + d * w);
    let weighted_mean_cm = weighted_sum / weight_sum;
    let mean: T = distances.iter().copied().fold(T::zero(), |a, b| a + b) / n;
    let var: T = distances
        .iter()
        .fold(T::zero(), |acc, &d| acc + (d - mean) * (d - mean))
        / n;
    let std_cm = var.sqrt();

    Ok((
        ErrorStats {
            median_cm,
            weighted_mean_cm,
            std_cm,
            n_joints,
            n_frames: pred.len(),
            n_detection_failures,
        },
        details,
    ))
}
