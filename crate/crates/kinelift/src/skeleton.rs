//! Hierarchical skeleton model: a tree of joints with per-joint DoF masks,
//! angle limits in degrees, and unit rest-pose bone directions.
//!
//! Topology lives in versioned JSON files, not code; the four shipped
//! skeletons are embedded in the library and available through
//! [`builtin_spec`]. Validation canonicalizes a spec into breadth-first
//! order (parents strictly before children) and builds the dense DoF index
//! tables used by the kinematics kernels.

use std::collections::HashMap;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Keypoints2D;
use crate::scalar::{real, Real};

/// Rotation axis of a single degree of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::X => write!(f, "X"),
            Axis::Y => write!(f, "Y"),
            Axis::Z => write!(f, "Z"),
        }
    }
}

/// One rotational DoF with its limits in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct DofRange<T> {
    pub axis: Axis,
    pub min_deg: T,
    pub max_deg: T,
}

/// A joint in an (unvalidated) skeleton description.
///
/// `rest_direction` is the unit direction of the bone offset from the parent,
/// expressed in the parent frame; it is unused (conventionally zero) for the
/// root.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec<T> {
    pub name: String,
    pub parent: Option<String>,
    pub rest_direction: Vector3<T>,
    pub dof: Vec<DofRange<T>>,
}

/// Skeleton description as parsed from a file or built programmatically.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec<T> {
    pub root: String,
    pub joints: Vec<JointSpec<T>>,
    pub version: Option<String>,
    pub notes: Option<String>,
}

impl<T: Real> SkeletonSpec<T> {
    /// Total DoF count: all joint DoF entries including the root's three.
    pub fn total_dof(&self) -> usize {
        self.joints.iter().map(|j| j.dof.len()).sum()
    }

    /// Parses a skeleton from its JSON representation.
    pub fn from_json(json: &str) -> Result<Self, SkeletonError> {
        let file: SkeletonFile = serde_json::from_str(json)?;
        Ok(file.into_spec())
    }

    /// Serializes the spec to the skeleton JSON schema.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SkeletonFile::from_spec(self))
            .expect("skeleton serialization cannot fail")
    }
}

/// Per-bone lengths in cm, indexed by validated joint index minus one
/// (every non-root joint owns the bone to its parent).
#[derive(Debug, Clone, PartialEq)]
pub struct BoneLengths<T> {
    values: Vec<T>,
}

impl<T: Real> BoneLengths<T> {
    /// Builds bone lengths, rejecting non-positive entries.
    pub fn new(values: Vec<T>) -> Result<Self, SkeletonError> {
        for (index, &v) in values.iter().enumerate() {
            if !(v > T::zero()) {
                return Err(SkeletonError::NonPositiveBoneLength {
                    index,
                    value: v.to_f64c(),
                });
            }
        }
        Ok(Self { values })
    }

    /// Uniform lengths, handy for tests and defaults.
    pub fn uniform(n_bones: usize, length: T) -> Result<Self, SkeletonError> {
        Self::new(vec![length; n_bones])
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

    /// Length of the bone owned by validated joint `joint_index` (>= 1).
    pub fn for_joint(&self, joint_index: usize) -> T {
        self.values[joint_index - 1]
    }
}

/// Errors detected while validating a skeleton description.
#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton has no joint named `{0}` to use as the root")]
    MissingRoot(String),
    #[error("duplicate joint name `{0}`")]
    DuplicateJoint(String),
    #[error("joint `{0}` is parentless but is not the declared root")]
    MultipleRoots(String),
    #[error("joint `{joint}` references unknown parent `{parent}`")]
    OrphanJoint { joint: String, parent: String },
    #[error("joint `{0}` is not reachable from the root (parent cycle)")]
    CycleDetected(String),
    #[error("joint `{joint}` lists axis {axis} more than once")]
    DuplicateAxis { joint: String, axis: Axis },
    #[error("joint `{joint}` axis {axis} has invalid limits [{min_deg}, {max_deg}] degrees")]
    InvalidLimitRange {
        joint: String,
        axis: Axis,
        min_deg: f64,
        max_deg: f64,
    },
    #[error("joint `{0}` rest direction is not a unit vector")]
    InvalidRestDirection(String),
    #[error("root joint `{0}` must have exactly 3 distinct-axis DoF spanning [-180, 180] degrees")]
    InvalidRootDof(String),
    #[error("bone length {value} at index {index} is not positive")]
    NonPositiveBoneLength { index: usize, value: f64 },
    #[error("unknown builtin skeleton `{0}`")]
    UnknownBuiltin(String),
    #[error("failed to parse skeleton JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A joint inside a [`ValidatedSkeleton`], in canonical (BFS) order.
#[derive(Debug, Clone)]
pub struct JointNode<T> {
    pub name: String,
    /// Index of the parent in canonical order; `None` only for the root.
    pub parent: Option<usize>,
    pub rest_direction: Vector3<T>,
    pub dof: Vec<DofRange<T>>,
    /// Offset of this joint's first DoF in the flat angle vector.
    pub dof_offset: usize,
}

/// A skeleton whose invariants have been checked, canonicalized into
/// breadth-first order with dense DoF index tables.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct ValidatedSkeleton<T> {
    joints: Vec<JointNode<T>>,
    name_index: HashMap<String, usize>,
    total_dof: usize,
    dof_axes: Vec<Axis>,
    dof_joint: Vec<usize>,
    dof_min_rad: Vec<T>,
    dof_max_rad: Vec<T>,
    version: Option<String>,
    notes: Option<String>,
}

impl<T: Real> ValidatedSkeleton<T> {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    /// Number of bones (equivalently, non-root joints).
    pub fn n_bones(&self) -> usize {
        self.joints.len() - 1
    }

    /// All joint DoF entries, including the root's three.
    pub fn total_dof(&self) -> usize {
        self.total_dof
    }

    /// Constrained DoF count, i.e. everything but the 3 root DoF.
    pub fn non_root_dof(&self) -> usize {
        self.total_dof - self.joints[0].dof.len()
    }

    pub fn joints(&self) -> &[JointNode<T>] {
        &self.joints
    }

    pub fn joint(&self, index: usize) -> &JointNode<T> {
        &self.joints[index]
    }

    pub fn joint_names(&self) -> impl Iterator<Item = &str> {
        self.joints.iter().map(|j| j.name.as_str())
    }

    pub fn find_joint(&self, name: &str) -> Option<usize> {
        self.name_index.get(name).copied()
    }

    /// Axis of each flat DoF slot.
    pub fn dof_axes(&self) -> &[Axis] {
        &self.dof_axes
    }

    /// Owning joint of each flat DoF slot.
    pub fn dof_joint(&self) -> &[usize] {
        &self.dof_joint
    }

    /// Lower limits in radians, one per flat DoF slot.
    pub fn dof_min_rad(&self) -> &[T] {
        &self.dof_min_rad
    }

    /// Upper limits in radians, one per flat DoF slot.
    pub fn dof_max_rad(&self) -> &[T] {
        &self.dof_max_rad
    }

    /// The canonical spec this skeleton validates to (joints in BFS order).
    pub fn to_spec(&self) -> SkeletonSpec<T> {
        SkeletonSpec {
            root: self.joints[0].name.clone(),
            joints: self
                .joints
                .iter()
                .map(|j| JointSpec {
                    name: j.name.clone(),
                    parent: j.parent.map(|p| self.joints[p].name.clone()),
                    rest_direction: j.rest_direction,
                    dof: j.dof.clone(),
                })
                .collect(),
            version: self.version.clone(),
            notes: self.notes.clone(),
        }
    }

    /// Edge list as (child, parent) validated-index pairs, children in order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.joints
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, j)| (i, j.parent.expect("non-root joint has a parent")))
    }
}

const UNIT_NORM_TOL: f64 = 1e-9;

/// Checks all skeleton invariants and canonicalizes into BFS order.
///
/// Parents always precede children in the returned skeleton; sibling order
/// follows the order joints were listed in the spec.
pub fn validate_skeleton<T: Real>(
    spec: &SkeletonSpec<T>,
) -> Result<ValidatedSkeleton<T>, SkeletonError> {
    let n = spec.joints.len();

    let mut index_of = HashMap::with_capacity(n);
    for (i, joint) in spec.joints.iter().enumerate() {
        if index_of.insert(joint.name.clone(), i).is_some() {
            return Err(SkeletonError::DuplicateJoint(joint.name.clone()));
        }
    }

    let root = *index_of
        .get(&spec.root)
        .ok_or_else(|| SkeletonError::MissingRoot(spec.root.clone()))?;

    // Resolve parents and collect children in spec order.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, joint) in spec.joints.iter().enumerate() {
        match &joint.parent {
            None => {
                if i != root {
                    return Err(SkeletonError::MultipleRoots(joint.name.clone()));
                }
            }
            Some(parent) => {
                if i == root {
                    return Err(SkeletonError::MultipleRoots(joint.name.clone()));
                }
                let p = *index_of.get(parent).ok_or_else(|| SkeletonError::OrphanJoint {
                    joint: joint.name.clone(),
                    parent: parent.clone(),
                })?;
                children[p].push(i);
            }
        }
    }

    // Breadth-first traversal; anything unreachable sits on a parent cycle.
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(root);
    visited[root] = true;
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &c in &children[i] {
            if !visited[c] {
                visited[c] = true;
                queue.push_back(c);
            }
        }
    }
    if order.len() != n {
        let unreachable = spec
            .joints
            .iter()
            .enumerate()
            .find(|(i, _)| !visited[*i])
            .map(|(_, j)| j.name.clone())
            .expect("some joint is unreachable");
        return Err(SkeletonError::CycleDetected(unreachable));
    }

    // Per-joint invariant checks.
    let limit = real::<T>(180.0);
    for (i, joint) in spec.joints.iter().enumerate() {
        let mut seen = Vec::new();
        for d in &joint.dof {
            if seen.contains(&d.axis) {
                return Err(SkeletonError::DuplicateAxis {
                    joint: joint.name.clone(),
                    axis: d.axis,
                });
            }
            seen.push(d.axis);
        }
        if i == root {
            let full_range = joint.dof.len() == 3
                && joint
                    .dof
                    .iter()
                    .all(|d| d.min_deg == -limit && d.max_deg == limit);
            if !full_range {
                return Err(SkeletonError::InvalidRootDof(joint.name.clone()));
            }
        } else {
            for d in &joint.dof {
                let bad = !(d.min_deg < d.max_deg)
                    || d.min_deg.abs() > limit
                    || d.max_deg.abs() > limit;
                if bad {
                    return Err(SkeletonError::InvalidLimitRange {
                        joint: joint.name.clone(),
                        axis: d.axis,
                        min_deg: d.min_deg.to_f64c(),
                        max_deg: d.max_deg.to_f64c(),
                    });
                }
            }
            let norm = joint.rest_direction.norm().to_f64c();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(SkeletonError::InvalidRestDirection(joint.name.clone()));
            }
        }
    }

    // Canonicalize into BFS order and build the flat DoF tables.
    let mut old_to_new = vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        old_to_new[old] = new;
    }

    let deg_to_rad = T::pi() / limit;
    let mut joints = Vec::with_capacity(n);
    let mut name_index = HashMap::with_capacity(n);
    let mut dof_axes = Vec::new();
    let mut dof_joint = Vec::new();
    let mut dof_min_rad = Vec::new();
    let mut dof_max_rad = Vec::new();
    for (new, &old) in order.iter().enumerate() {
        let src = &spec.joints[old];
        let dof_offset = dof_axes.len();
        for d in &src.dof {
            dof_axes.push(d.axis);
            dof_joint.push(new);
            dof_min_rad.push(d.min_deg * deg_to_rad);
            dof_max_rad.push(d.max_deg * deg_to_rad);
        }
        name_index.insert(src.name.clone(), new);
        joints.push(JointNode {
            name: src.name.clone(),
            parent: src
                .parent
                .as_ref()
                .map(|p| old_to_new[index_of[p]]),
            rest_direction: src.rest_direction,
            dof: src.dof.clone(),
            dof_offset,
        });
    }

    Ok(ValidatedSkeleton {
        joints,
        name_index,
        total_dof: dof_axes.len(),
        dof_axes,
        dof_joint,
        dof_min_rad,
        dof_max_rad,
        version: spec.version.clone(),
        notes: spec.notes.clone(),
    })
}

const BODY_SIGN19_JSON: &str = include_str!("../data/body_sign19.json");
const HAND26_JSON: &str = include_str!("../data/hand26.json");
const BODY_PANOPTIC29_JSON: &str = include_str!("../data/body_panoptic29.json");
const BODY_H36M31_JSON: &str = include_str!("../data/body_h36m31.json");

/// Names of the embedded skeleton files.
pub const BUILTIN_SKELETONS: [&str; 4] =
    ["body_sign19", "hand26", "body_panoptic29", "body_h36m31"];

/// Returns an embedded skeleton spec by name (with or without `.json`).
pub fn builtin_spec<T: Real>(name: &str) -> Result<SkeletonSpec<T>, SkeletonError> {
    let stem = name.strip_suffix(".json").unwrap_or(name);
    let json = match stem {
        "body_sign19" => BODY_SIGN19_JSON,
        "hand26" => HAND26_JSON,
        "body_panoptic29" => BODY_PANOPTIC29_JSON,
        "body_h36m31" => BODY_H36M31_JSON,
        _ => return Err(SkeletonError::UnknownBuiltin(name.to_string())),
    };
    SkeletonSpec::from_json(json)
}

/// The 19-joint upper-torso body skeleton used for sign-language capture:
/// 19 constrained angles plus the 3 unconstrained root DoF.
pub fn default_upper_body_spec<T: Real>() -> SkeletonSpec<T> {
    builtin_spec("body_sign19").expect("embedded body skeleton is valid JSON")
}

/// The 21-joint hand skeleton with 26 constrained angles plus the 3
/// unconstrained wrist-root DoF.
pub fn default_hand_spec<T: Real>() -> SkeletonSpec<T> {
    builtin_spec("hand26").expect("embedded hand skeleton is valid JSON")
}

/// Default 2D input normalization for a skeleton: mid-shoulder origin and
/// shoulder distance for bodies, wrist origin and wrist-to-middle-MCP
/// distance for hands. Falls back to the root and the first bone when the
/// expected joints are absent.
pub fn default_normalization<T: Real>(
    skeleton: &ValidatedSkeleton<T>,
) -> crate::camera::NormalizationSpec {
    use crate::camera::NormalizationSpec;
    if let (Some(l), Some(r)) = (
        skeleton.find_joint("left_shoulder"),
        skeleton.find_joint("right_shoulder"),
    ) {
        return NormalizationSpec::body_default(l, r);
    }
    if let (Some(w), Some(m)) = (
        skeleton.find_joint("wrist"),
        skeleton.find_joint("middle_mcp"),
    ) {
        return NormalizationSpec::hand_default(w, m);
    }
    NormalizationSpec {
        origin: crate::camera::OriginRef::Joint(0),
        scale: (0, 1),
    }
}

/// Mirrors keypoints about the normalization origin by negating x.
///
/// This is the input half of serving both hands with one model; confidences
/// are preserved and the operation is an exact involution.
pub fn mirror_hand<T: Real>(points: &Keypoints2D<T>) -> Keypoints2D<T> {
    let mirrored = points
        .points()
        .iter()
        .map(|p| nalgebra::Vector2::new(-p.x, p.y))
        .collect();
    Keypoints2D::from_parts(mirrored, points.confidence().to_vec())
}

// --- JSON schema ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DofFile {
    axis: Axis,
    min_deg: f64,
    max_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct JointFile {
    name: String,
    parent: Option<String>,
    rest_direction: [f64; 3],
    dof: Vec<DofFile>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    notes: Option<String>,
    root: String,
    joints: Vec<JointFile>,
}

impl SkeletonFile {
    fn into_spec<T: Real>(self) -> SkeletonSpec<T> {
        SkeletonSpec {
            root: self.root,
            joints: self
                .joints
                .into_iter()
                .map(|j| JointSpec {
                    name: j.name,
                    parent: j.parent,
                    rest_direction: Vector3::new(
                        real(j.rest_direction[0]),
                        real(j.rest_direction[1]),
                        real(j.rest_direction[2]),
                    ),
                    dof: j
                        .dof
                        .into_iter()
                        .map(|d| DofRange {
                            axis: d.axis,
                            min_deg: real(d.min_deg),
                            max_deg: real(d.max_deg),
                        })
                        .collect(),
                })
                .collect(),
            version: self.version,
            notes: self.notes,
        }
    }

    fn from_spec<T: Real>(spec: &SkeletonSpec<T>) -> Self {
        SkeletonFile {
            version: spec.version.clone(),
            notes: spec.notes.clone(),
            root: spec.root.clone(),
            joints: spec
                .joints
                .iter()
                .map(|j| JointFile {
                    name: j.name.clone(),
                    parent: j.parent.clone(),
                    rest_direction: [
                        j.rest_direction.x.to_f64c(),
                        j.rest_direction.y.to_f64c(),
                        j.rest_direction.z.to_f64c(),
                    ],
                    dof: j
                        .dof
                        .iter()
                        .map(|d| DofFile {
                            axis: d.axis,
                            min_deg: d.min_deg.to_f64c(),
                            max_deg: d.max_deg.to_f64c(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;
    use proptest::prelude::*;

    fn chain_spec() -> SkeletonSpec<f64> {
        SkeletonSpec {
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
                    dof: vec![],
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
        }
    }

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

    #[test]
    fn chain_bfs_order() {
        let v = validate_skeleton(&chain_spec()).unwrap();
        let names: Vec<_> = v.joint_names().collect();
        assert_eq!(names, ["root", "a", "b"]);
        assert_eq!(v.joint(1).parent, Some(0));
        assert_eq!(v.joint(2).parent, Some(1));
    }

    #[test]
    fn two_cycle_detected() {
        let mut spec = chain_spec();
        spec.joints[1].parent = Some("b".into());
        match validate_skeleton(&spec) {
            Err(SkeletonError::CycleDetected(name)) => {
                assert!(name == "a" || name == "b");
            }
            other => panic!("expected cycle error, got {other:?}"),
        }
    }

    #[test]
    fn orphan_parent_rejected() {
        let mut spec = chain_spec();
        spec.joints[2].parent = Some("nope".into());
        assert!(matches!(
            validate_skeleton(&spec),
            Err(SkeletonError::OrphanJoint { .. })
        ));
    }

    #[test]
    fn second_parentless_joint_rejected() {
        let mut spec = chain_spec();
        spec.joints[2].parent = None;
        assert!(matches!(
            validate_skeleton(&spec),
            Err(SkeletonError::MultipleRoots(name)) if name == "b"
        ));
    }

    #[test]
    fn duplicate_axis_rejected() {
        let mut spec = chain_spec();
        spec.joints[1].dof = vec![
            DofRange { axis: Axis::X, min_deg: -10.0, max_deg: 10.0 },
            DofRange { axis: Axis::X, min_deg: -20.0, max_deg: 20.0 },
        ];
        assert!(matches!(
            validate_skeleton(&spec),
            Err(SkeletonError::DuplicateAxis { .. })
        ));
    }

    #[test]
    fn inverted_limits_rejected() {
        let mut spec = chain_spec();
        spec.joints[1].dof = vec![DofRange {
            axis: Axis::Z,
            min_deg: 30.0,
            max_deg: -30.0,
        }];
        assert!(matches!(
            validate_skeleton(&spec),
            Err(SkeletonError::InvalidLimitRange { .. })
        ));
    }

    #[test]
    fn non_unit_rest_direction_rejected() {
        let mut spec = chain_spec();
        spec.joints[1].rest_direction = Vector3::new(2.0, 0.0, 0.0);
        assert!(matches!(
            validate_skeleton(&spec),
            Err(SkeletonError::InvalidRestDirection(name)) if name == "a"
        ));
    }

    #[test]
    fn constrained_root_rejected() {
        let mut spec = chain_spec();
        spec.joints[0].dof[2].max_deg = 90.0;
        assert!(matches!(
            validate_skeleton(&spec),
            Err(SkeletonError::InvalidRootDof(_))
        ));
    }

    #[test]
    fn upper_body_counts() {
        let spec = default_upper_body_spec::<f64>();
        let v = validate_skeleton(&spec).unwrap();
        assert_eq!(v.n_joints(), 19);
        assert_eq!(v.non_root_dof(), 19);
        assert_eq!(v.total_dof(), 22);
    }

    #[test]
    fn upper_body_allocation() {
        let v = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let dof_of = |name: &str| v.joint(v.find_joint(name).unwrap()).dof.len();
        assert_eq!(dof_of("left_elbow"), 1);
        assert_eq!(dof_of("right_elbow"), 1);
        assert_eq!(dof_of("left_shoulder"), 3);
        assert_eq!(dof_of("right_shoulder"), 3);
        assert_eq!(dof_of("head"), 3);
        assert_eq!(dof_of("spine"), 3);
        assert_eq!(dof_of("chest"), 2);
        // Face satellites inherit the head rotation with zero DoF.
        for name in ["left_eye", "right_eye", "left_ear", "right_ear", "nose", "mouth"] {
            assert_eq!(dof_of(name), 0, "{name} should carry no DoF");
        }
    }

    #[test]
    fn hand_counts() {
        let spec = default_hand_spec::<f64>();
        assert_eq!(spec.joints.len(), 21);
        let v = validate_skeleton(&spec).unwrap();
        assert_eq!(v.n_joints(), 21);
        assert_eq!(v.non_root_dof(), 26);
    }

    #[test]
    fn all_builtins_validate() {
        for name in BUILTIN_SKELETONS {
            let spec = builtin_spec::<f64>(name).unwrap();
            let v = validate_skeleton(&spec).unwrap();
            // Parents strictly before children in canonical order.
            for (child, parent) in v.edges() {
                assert!(parent < child);
            }
        }
        assert!(matches!(
            builtin_spec::<f64>("nope"),
            Err(SkeletonError::UnknownBuiltin(_))
        ));
    }

    #[test]
    fn panoptic_and_h36m_totals() {
        let p = validate_skeleton(&builtin_spec::<f64>("body_panoptic29").unwrap()).unwrap();
        assert_eq!(p.n_joints(), 19);
        assert_eq!(p.total_dof(), 29);
        let h = validate_skeleton(&builtin_spec::<f64>("body_h36m31").unwrap()).unwrap();
        assert_eq!(h.n_joints(), 17);
        assert_eq!(h.total_dof(), 31);
    }

    #[test]
    fn validation_is_idempotent() {
        let v1 = validate_skeleton(&default_upper_body_spec::<f64>()).unwrap();
        let v2 = validate_skeleton(&v1.to_spec()).unwrap();
        let names1: Vec<_> = v1.joint_names().collect();
        let names2: Vec<_> = v2.joint_names().collect();
        assert_eq!(names1, names2);
        assert_eq!(v1.dof_axes(), v2.dof_axes());
        assert_eq!(v1.dof_min_rad(), v2.dof_min_rad());
    }

    #[test]
    fn skeleton_json_round_trips() {
        let spec = default_hand_spec::<f64>();
        let again = SkeletonSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn bone_lengths_must_be_positive() {
        assert!(BoneLengths::new(vec![1.0, 0.0]).is_err());
        assert!(BoneLengths::new(vec![1.0, -2.0]).is_err());
        assert!(BoneLengths::new(vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn mirror_examples() {
        let kp = Keypoints2D::from_parts(
            vec![Vector2::new(0.5, 0.2), Vector2::new(0.0, 0.7)],
            vec![0.9, 0.4],
        );
        let m = mirror_hand(&kp);
        assert_eq!(m.points()[0], Vector2::new(-0.5, 0.2));
        assert_eq!(m.points()[1], Vector2::new(0.0, 0.7));
        assert_eq!(m.confidence(), kp.confidence());
    }

    proptest! {
        #[test]
        fn mirror_is_involution_and_preserves_y_distances(
            pts in proptest::collection::vec((-1000.0f64..1000.0, -1000.0f64..1000.0), 1..40)
        ) {
            let kp = Keypoints2D::from_parts(
                pts.iter().map(|&(x, y)| Vector2::new(x, y)).collect(),
                vec![1.0; pts.len()],
            );
            let twice = mirror_hand(&mirror_hand(&kp));
            prop_assert_eq!(twice.points(), kp.points());
            let once = mirror_hand(&kp);
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let d0 = kp.points()[i].y - kp.points()[j].y;
                    let d1 = once.points()[i].y - once.points()[j].y;
                    prop_assert_eq!(d0, d1);
                }
            }
        }
    }
}
