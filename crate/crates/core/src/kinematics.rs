//! Robot descriptions and forward kinematics.
//!
//! Robots are read from a small URDF subset: `<link>`, `<joint>` with
//! `revolute`, `prismatic` or `fixed` type, `<origin xyz rpy>`, `<axis>` and
//! `<limit lower upper>`. Two extensions are recognized: `<keypoint name link
//! xyz>` elements under `<robot>`, and `<capsule from to radius>` elements
//! inside a `<link>` (consumed by the silhouette renderer).
//!
//! Units in description files: lengths in millimeters, `rpy` in radians,
//! revolute limits in degrees and prismatic limits in millimeters. Joint state
//! vectors use degrees / millimeters at the API surface; Jacobians are taken
//! with respect to radians / millimeters.
//!
//! Two anchorings of the camera-frame keypoints are provided:
//!
//! * [`forward_kinematics`] places the base link with a [`RigidPose`]:
//!   `P_i = R · X_i(q) + t`.
//! * [`holistic_keypoints`] treats `t` as the camera-frame position of the root
//!   keypoint: `P_i = R · (X_i(q) - X_root(q)) + t`, so `P_root = t` exactly.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{
    DMatrix, Isometry3, Matrix3, Point3, Rotation3, Translation3, Unit, UnitQuaternion, Vector3,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::{self, r6_to_matrix, r6_to_matrix_jacobian, Rotation6D, RotationError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("missing element or attribute: {0}")]
    Missing(String),
    #[error("invalid value for {what}: {value:?}")]
    InvalidValue { what: String, value: String },
    #[error("unknown joint kind {0:?}")]
    UnknownJointKind(String),
    #[error("reference to missing link {0:?}")]
    MissingLink(String),
    #[error("duplicate name {0:?}")]
    DuplicateName(String),
    #[error("cyclic joint graph")]
    CyclicJointGraph,
    #[error("joint graph is not a tree: {0}")]
    NotATree(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Rotation(#[from] RotationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

impl JointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            JointKind::Revolute => "revolute",
            JointKind::Prismatic => "prismatic",
            JointKind::Fixed => "fixed",
        }
    }

    /// Public unit → internal unit factor (degrees → radians for revolute).
    pub fn to_internal_scale(&self) -> f64 {
        match self {
            JointKind::Revolute => std::f64::consts::PI / 180.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Origin {
    /// Millimeters.
    pub xyz: Vector3<f64>,
    /// Fixed-axis roll, pitch, yaw in radians.
    pub rpy: Vector3<f64>,
}

impl Default for Origin {
    fn default() -> Self {
        Self {
            xyz: Vector3::zeros(),
            rpy: Vector3::zeros(),
        }
    }
}

impl Origin {
    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.xyz),
            UnitQuaternion::from_euler_angles(self.rpy.x, self.rpy.y, self.rpy.z),
        )
    }
}

/// Closed interval in public units (degrees or millimeters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub lower: f64,
    pub upper: f64,
}

impl Limits {
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    pub origin: Origin,
    pub axis: Unit<Vector3<f64>>,
    /// Limits as written in the description, if any.
    pub limits: Option<Limits>,
}

impl JointSpec {
    /// Limits used for clamping and sampling. Revolute joints without a
    /// `<limit>` are treated as [-180°, 180°]; prismatic ones as unbounded.
    pub fn effective_limits(&self) -> Limits {
        match (self.limits, self.kind) {
            (Some(l), _) => l,
            (None, JointKind::Revolute) => Limits {
                lower: -180.0,
                upper: 180.0,
            },
            (None, _) => Limits {
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
            },
        }
    }
}

/// Line segment swept by a sphere, in link coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleSpec {
    pub from: Vector3<f64>,
    pub to: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub capsules: Vec<CapsuleSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSpec {
    pub name: String,
    pub link: String,
    pub offset: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    name: String,
    links: Vec<Link>,
    /// Document order.
    joints: Vec<JointSpec>,
    keypoints: Vec<KeypointSpec>,
    root_keypoint: usize,
    // derived
    base_link: usize,
    topo_joints: Vec<usize>,
    joint_parent: Vec<usize>,
    joint_child: Vec<usize>,
    joint_state_index: Vec<Option<usize>>,
    state_joint: Vec<usize>,
    keypoint_link: Vec<usize>,
    /// State indices of the moving joints between the base and each link.
    link_ancestors: Vec<Vec<usize>>,
}

/// Rigid transform `x ↦ R x + t` (t in mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose::new(rt, -(rt * self.translation))
    }
}

/// Joint states in public units: degrees for revolute, mm for prismatic,
/// indexed by the document order of non-fixed joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointState(pub Vec<f64>);

impl JointState {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(model: &RobotModel) -> Self {
        Self(vec![0.0; model.dof()])
    }

    /// Midpoint of every joint's effective limits (zero where unbounded).
    pub fn midpoint(model: &RobotModel) -> Self {
        Self(
            model
                .state_joints()
                .map(|j| {
                    let l = j.effective_limits();
                    if l.is_bounded() {
                        l.midpoint()
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Radians / mm.
    pub fn to_internal(&self, model: &RobotModel) -> Result<Vec<f64>, KinematicsError> {
        model.check_dof(self.len())?;
        Ok(self
            .0
            .iter()
            .zip(model.state_joints())
            .map(|(v, j)| v * j.kind.to_internal_scale())
            .collect())
    }

    pub fn from_internal(model: &RobotModel, internal: &[f64]) -> Result<Self, KinematicsError> {
        model.check_dof(internal.len())?;
        Ok(Self(
            internal
                .iter()
                .zip(model.state_joints())
                .map(|(v, j)| v / j.kind.to_internal_scale())
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointFrame {
    /// `P^r`: absolute x/y, z relative to the root depth.
    RootRelative,
    /// `P'`: root-relative keypoints lifted by the root depth.
    LiftedAbsolute,
    /// `P`: forward-kinematics keypoints in the camera frame.
    FkAbsolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Vector3<f64>>,
    pub frame: KeypointFrame,
}

impl KeypointSet {
    pub fn new(points: Vec<Vector3<f64>>, frame: KeypointFrame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flattened `3N` vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }
}

// ---------------------------------------------------------------------------
// parsing

fn parse_vec3(s: &str, what: &str) -> Result<Vector3<f64>, KinematicsError> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    let bad = || KinematicsError::InvalidValue {
        what: what.to_string(),
        value: s.to_string(),
    };
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut v = Vector3::zeros();
    for (i, p) in parts.iter().enumerate() {
        v[i] = p.parse::<f64>().map_err(|_| bad())?;
        if !v[i].is_finite() {
            return Err(bad());
        }
    }
    Ok(v)
}

fn parse_f64(s: &str, what: &str) -> Result<f64, KinematicsError> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| KinematicsError::InvalidValue {
            what: what.to_string(),
            value: s.to_string(),
        })
}

fn required_attr<'a>(
    node: roxmltree::Node<'a, '_>,
    attr: &str,
    ctx: &str,
) -> Result<&'a str, KinematicsError> {
    node.attribute(attr)
        .ok_or_else(|| KinematicsError::Missing(format!("{ctx}@{attr}")))
}

fn child_element<'a, 'i>(
    node: roxmltree::Node<'a, 'i>,
    tag: &str,
) -> Option<roxmltree::Node<'a, 'i>> {
    node.children()
        .find(|c| c.is_element() && c.tag_name().name() == tag)
}

fn parse_joint(node: roxmltree::Node<'_, '_>) -> Result<JointSpec, KinematicsError> {
    let name = required_attr(node, "name", "joint")?.to_string();
    let ctx = format!("joint {name:?}");
    let kind = match required_attr(node, "type", &ctx)? {
        "revolute" | "continuous" => JointKind::Revolute,
        "prismatic" => JointKind::Prismatic,
        "fixed" => JointKind::Fixed,
        other => return Err(KinematicsError::UnknownJointKind(other.to_string())),
    };
    let parent = child_element(node, "parent")
        .ok_or_else(|| KinematicsError::Missing(format!("{ctx}/parent")))?;
    let parent = required_attr(parent, "link", &format!("{ctx}/parent"))?.to_string();
    let child = child_element(node, "child")
        .ok_or_else(|| KinematicsError::Missing(format!("{ctx}/child")))?;
    let child = required_attr(child, "link", &format!("{ctx}/child"))?.to_string();

    let mut origin = Origin::default();
    if let Some(o) = child_element(node, "origin") {
        if let Some(xyz) = o.attribute("xyz") {
            origin.xyz = parse_vec3(xyz, &format!("{ctx}/origin@xyz"))?;
        }
        if let Some(rpy) = o.attribute("rpy") {
            origin.rpy = parse_vec3(rpy, &format!("{ctx}/origin@rpy"))?;
        }
    }

    let raw_axis = match child_element(node, "axis") {
        Some(a) => parse_vec3(required_attr(a, "xyz", &format!("{ctx}/axis"))?, "axis")?,
        None => Vector3::x(),
    };
    let n = raw_axis.norm();
    if n < 1e-12 {
        return Err(KinematicsError::InvalidValue {
            what: format!("{ctx}/axis"),
            value: "zero vector".into(),
        });
    }
    // leave unit axes bit-exact so that re-serialization round-trips
    let axis = if (n - 1.0).abs() <= 1e-9 {
        Unit::new_unchecked(raw_axis)
    } else {
        Unit::new_normalize(raw_axis)
    };

    let limits = match (kind, child_element(node, "limit")) {
        (JointKind::Fixed, _) | (_, None) => None,
        (_, Some(l)) => {
            let lower = parse_f64(required_attr(l, "lower", &format!("{ctx}/limit"))?, "lower")?;
            let upper = parse_f64(required_attr(l, "upper", &format!("{ctx}/limit"))?, "upper")?;
            if lower > upper {
                return Err(KinematicsError::InvalidValue {
                    what: format!("{ctx}/limit"),
                    value: format!("lower {lower} > upper {upper}"),
                });
            }
            Some(Limits { lower, upper })
        }
    };

    Ok(JointSpec {
        name,
        kind,
        parent,
        child,
        origin,
        axis,
        limits,
    })
}

/// Parses a URDF-subset robot description.
pub fn parse_robot_description(text: &str) -> Result<RobotModel, KinematicsError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| KinematicsError::Xml(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "robot" {
        return Err(KinematicsError::Missing("<robot> root element".into()));
    }
    let name = root.attribute("name").unwrap_or("robot").to_string();

    let mut links = Vec::new();
    let mut joints = Vec::new();
    let mut keypoints = Vec::new();
    for node in root.children().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "link" => {
                let lname = required_attr(node, "name", "link")?.to_string();
                let mut capsules = Vec::new();
                for c in node
                    .children()
                    .filter(|c| c.is_element() && c.tag_name().name() == "capsule")
                {
                    let ctx = format!("link {lname:?}/capsule");
                    let radius = parse_f64(required_attr(c, "radius", &ctx)?, &ctx)?;
                    if radius <= 0.0 {
                        return Err(KinematicsError::InvalidValue {
                            what: ctx,
                            value: radius.to_string(),
                        });
                    }
                    capsules.push(CapsuleSpec {
                        from: parse_vec3(required_attr(c, "from", &ctx)?, &ctx)?,
                        to: parse_vec3(required_attr(c, "to", &ctx)?, &ctx)?,
                        radius,
                    });
                }
                links.push(Link {
                    name: lname,
                    capsules,
                });
            }
            "joint" => joints.push(parse_joint(node)?),
            "keypoint" => {
                let kname = required_attr(node, "name", "keypoint")?.to_string();
                let ctx = format!("keypoint {kname:?}");
                let link = required_attr(node, "link", &ctx)?.to_string();
                let offset = match node.attribute("xyz") {
                    Some(s) => parse_vec3(s, &ctx)?,
                    None => Vector3::zeros(),
                };
                keypoints.push(KeypointSpec {
                    name: kname,
                    link,
                    offset,
                });
            }
            _ => {}
        }
    }
    RobotModel::build(name, links, joints, keypoints)
}

impl RobotModel {
    /// Validates the tree and derives the lookup tables. With no declared
    /// keypoints, one keypoint is placed at the base link origin.
    pub fn build(
        name: String,
        links: Vec<Link>,
        joints: Vec<JointSpec>,
        mut keypoints: Vec<KeypointSpec>,
    ) -> Result<Self, KinematicsError> {
        if links.is_empty() {
            return Err(KinematicsError::Missing("at least one <link>".into()));
        }
        let mut link_index = HashMap::new();
        for (i, l) in links.iter().enumerate() {
            if link_index.insert(l.name.clone(), i).is_some() {
                return Err(KinematicsError::DuplicateName(l.name.clone()));
            }
        }
        let mut joint_names = HashMap::new();
        let mut joint_parent = Vec::with_capacity(joints.len());
        let mut joint_child = Vec::with_capacity(joints.len());
        let mut parent_joint_of: Vec<Option<usize>> = vec![None; links.len()];
        for (ji, j) in joints.iter().enumerate() {
            if joint_names.insert(j.name.clone(), ji).is_some() {
                return Err(KinematicsError::DuplicateName(j.name.clone()));
            }
            let p = *link_index
                .get(&j.parent)
                .ok_or_else(|| KinematicsError::MissingLink(j.parent.clone()))?;
            let c = *link_index
                .get(&j.child)
                .ok_or_else(|| KinematicsError::MissingLink(j.child.clone()))?;
            if p == c {
                return Err(KinematicsError::CyclicJointGraph);
            }
            if parent_joint_of[c].is_some() {
                return Err(KinematicsError::NotATree(format!(
                    "link {:?} has more than one parent joint",
                    j.child
                )));
            }
            parent_joint_of[c] = Some(ji);
            joint_parent.push(p);
            joint_child.push(c);
        }

        let roots: Vec<usize> = (0..links.len())
            .filter(|&l| parent_joint_of[l].is_none())
            .collect();
        let base_link = match roots.as_slice() {
            [] => return Err(KinematicsError::CyclicJointGraph),
            [r] => *r,
            _ => {
                return Err(KinematicsError::NotATree(format!(
                    "multiple root links: {}",
                    roots
                        .iter()
                        .map(|&r| links[r].name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                )))
            }
        };

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
        for (ji, &p) in joint_parent.iter().enumerate() {
            children[p].push(ji);
        }
        let mut topo_joints = Vec::with_capacity(joints.len());
        let mut visited = vec![false; links.len()];
        let mut queue = std::collections::VecDeque::from([base_link]);
        visited[base_link] = true;
        while let Some(l) = queue.pop_front() {
            for &ji in &children[l] {
                let c = joint_child[ji];
                if visited[c] {
                    return Err(KinematicsError::CyclicJointGraph);
                }
                visited[c] = true;
                topo_joints.push(ji);
                queue.push_back(c);
            }
        }
        if visited.iter().any(|v| !v) {
            // every unreachable link has exactly one parent, so it sits on a cycle
            return Err(KinematicsError::CyclicJointGraph);
        }

        let mut joint_state_index = vec![None; joints.len()];
        let mut state_joint = Vec::new();
        for (ji, j) in joints.iter().enumerate() {
            if j.kind != JointKind::Fixed {
                joint_state_index[ji] = Some(state_joint.len());
                state_joint.push(ji);
            }
        }

        let mut link_ancestors: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
        for &ji in &topo_joints {
            let mut chain = link_ancestors[joint_parent[ji]].clone();
            if let Some(s) = joint_state_index[ji] {
                chain.push(s);
            }
            link_ancestors[joint_child[ji]] = chain;
        }

        if keypoints.is_empty() {
            keypoints.push(KeypointSpec {
                name: links[base_link].name.clone(),
                link: links[base_link].name.clone(),
                offset: Vector3::zeros(),
            });
        }
        let mut keypoint_names = HashMap::new();
        let mut keypoint_link = Vec::with_capacity(keypoints.len());
        for k in &keypoints {
            if keypoint_names.insert(k.name.clone(), ()).is_some() {
                return Err(KinematicsError::DuplicateName(k.name.clone()));
            }
            keypoint_link.push(
                *link_index
                    .get(&k.link)
                    .ok_or_else(|| KinematicsError::MissingLink(k.link.clone()))?,
            );
        }

        let mut model = RobotModel {
            name,
            links,
            joints,
            keypoints,
            root_keypoint: 0,
            base_link,
            topo_joints,
            joint_parent,
            joint_child,
            joint_state_index,
            state_joint,
            keypoint_link,
            link_ancestors,
        };
        model.root_keypoint = model.nearest_to_center();
        Ok(model)
    }

    fn nearest_to_center(&self) -> usize {
        let zero = vec![0.0; self.dof()];
        let pts = self.base_keypoints_internal(&zero);
        let center = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = (p - center).norm();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// All joints in document order.
    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    /// Joints in parent-before-child order.
    pub fn topological_joints(&self) -> impl Iterator<Item = &JointSpec> {
        self.topo_joints.iter().map(move |&j| &self.joints[j])
    }

    /// Non-fixed joints in state-vector order.
    pub fn state_joints(&self) -> impl Iterator<Item = &JointSpec> + '_ {
        self.state_joint.iter().map(move |&j| &self.joints[j])
    }

    pub fn state_joint(&self, index: usize) -> &JointSpec {
        &self.joints[self.state_joint[index]]
    }

    pub fn joint_kinds(&self) -> Vec<JointKind> {
        self.state_joints().map(|j| j.kind).collect()
    }

    pub fn keypoints(&self) -> &[KeypointSpec] {
        &self.keypoints
    }

    pub fn base_link(&self) -> &Link {
        &self.links[self.base_link]
    }

    pub fn dof(&self) -> usize {
        self.state_joint.len()
    }

    pub fn n_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn root_keypoint(&self) -> usize {
        self.root_keypoint
    }

    /// State indices of the moving joints between the base and keypoint `k`.
    pub fn keypoint_joints(&self, k: usize) -> &[usize] {
        &self.link_ancestors[self.keypoint_link[k]]
    }

    pub(crate) fn check_dof(&self, n: usize) -> Result<(), KinematicsError> {
        if n == self.dof() {
            Ok(())
        } else {
            Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                actual: n,
            })
        }
    }

    /// Returns a copy with keypoints reordered so that new keypoint `i` is
    /// old keypoint `order[i]`. The root keypoint follows its keypoint.
    pub fn with_keypoint_order(&self, order: &[usize]) -> Result<Self, KinematicsError> {
        if order.len() != self.n_keypoints() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.n_keypoints(),
                actual: order.len(),
            });
        }
        let mut seen = vec![false; order.len()];
        for &o in order {
            if o >= order.len() || std::mem::replace(&mut seen[o], true) {
                return Err(KinematicsError::InvalidValue {
                    what: "keypoint permutation".into(),
                    value: format!("{order:?}"),
                });
            }
        }
        let mut m = self.clone();
        m.keypoints = order.iter().map(|&o| self.keypoints[o].clone()).collect();
        m.keypoint_link = order.iter().map(|&o| self.keypoint_link[o]).collect();
        m.root_keypoint = order
            .iter()
            .position(|&o| o == self.root_keypoint)
            .expect("permutation contains the root");
        Ok(m)
    }

    /// Base-frame transform of every link for internal joint values.
    pub fn link_frames(&self, q_internal: &[f64]) -> Vec<Isometry3<f64>> {
        self.frames(q_internal).0
    }

    /// Link frames plus, per state index, the joint axis and origin in the base frame.
    fn frames(
        &self,
        q_internal: &[f64],
    ) -> (Vec<Isometry3<f64>>, Vec<(Vector3<f64>, Vector3<f64>)>) {
        let mut frames = vec![Isometry3::identity(); self.links.len()];
        let mut axes = vec![(Vector3::zeros(), Vector3::zeros()); self.dof()];
        for &ji in &self.topo_joints {
            let joint = &self.joints[ji];
            let at_joint = frames[self.joint_parent[ji]] * joint.origin.isometry();
            let motion = match (joint.kind, self.joint_state_index[ji]) {
                (JointKind::Revolute, Some(s)) => {
                    axes[s] = (at_joint.rotation * joint.axis.into_inner(), at_joint.translation.vector);
                    Isometry3::from_parts(
                        Translation3::identity(),
                        UnitQuaternion::from_axis_angle(&joint.axis, q_internal[s]),
                    )
                }
                (JointKind::Prismatic, Some(s)) => {
                    axes[s] = (at_joint.rotation * joint.axis.into_inner(), at_joint.translation.vector);
                    Isometry3::from_parts(
                        Translation3::from(joint.axis.into_inner() * q_internal[s]),
                        UnitQuaternion::identity(),
                    )
                }
                _ => Isometry3::identity(),
            };
            frames[self.joint_child[ji]] = at_joint * motion;
        }
        (frames, axes)
    }

    fn base_keypoints_internal(&self, q_internal: &[f64]) -> Vec<Vector3<f64>> {
        let frames = self.link_frames(q_internal);
        self.keypoints
            .iter()
            .zip(&self.keypoint_link)
            .map(|(k, &l)| (frames[l] * Point3::from(k.offset)).coords)
            .collect()
    }

    /// Base-frame keypoint derivatives: `d[k][s] = ∂X_k/∂q_s` (per rad / mm).
    fn base_keypoint_derivatives(
        &self,
        q_internal: &[f64],
    ) -> (Vec<Vector3<f64>>, Vec<Vec<Vector3<f64>>>) {
        let (frames, axes) = self.frames(q_internal);
        let mut points = Vec::with_capacity(self.n_keypoints());
        let mut derivs = Vec::with_capacity(self.n_keypoints());
        for (k, &l) in self.keypoints.iter().zip(&self.keypoint_link) {
            let x = (frames[l] * Point3::from(k.offset)).coords;
            let mut row = vec![Vector3::zeros(); self.dof()];
            for &s in &self.link_ancestors[l] {
                let (axis, origin) = axes[s];
                row[s] = match self.state_joint(s).kind {
                    JointKind::Revolute => axis.cross(&(x - origin)),
                    _ => axis,
                };
            }
            points.push(x);
            derivs.push(row);
        }
        (points, derivs)
    }

    /// Serializes back to the description format. Floats use shortest
    /// round-trip formatting so that parsing the output reproduces `self`.
    pub fn to_description(&self) -> String {
        let v = |v: &Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        let mut s = String::new();
        let _ = writeln!(s, "<robot name=\"{}\">", xml_escape(&self.name));
        for l in &self.links {
            if l.capsules.is_empty() {
                let _ = writeln!(s, "  <link name=\"{}\"/>", xml_escape(&l.name));
            } else {
                let _ = writeln!(s, "  <link name=\"{}\">", xml_escape(&l.name));
                for c in &l.capsules {
                    let _ = writeln!(
                        s,
                        "    <capsule from=\"{}\" to=\"{}\" radius=\"{}\"/>",
                        v(&c.from),
                        v(&c.to),
                        c.radius
                    );
                }
                let _ = writeln!(s, "  </link>");
            }
        }
        for j in &self.joints {
            let _ = writeln!(
                s,
                "  <joint name=\"{}\" type=\"{}\">",
                xml_escape(&j.name),
                j.kind.as_str()
            );
            let _ = writeln!(s, "    <parent link=\"{}\"/>", xml_escape(&j.parent));
            let _ = writeln!(s, "    <child link=\"{}\"/>", xml_escape(&j.child));
            let _ = writeln!(
                s,
                "    <origin xyz=\"{}\" rpy=\"{}\"/>",
                v(&j.origin.xyz),
                v(&j.origin.rpy)
            );
            let _ = writeln!(s, "    <axis xyz=\"{}\"/>", v(&j.axis));
            if let Some(l) = j.limits {
                let _ = writeln!(s, "    <limit lower=\"{}\" upper=\"{}\"/>", l.lower, l.upper);
            }
            let _ = writeln!(s, "  </joint>");
        }
        for k in &self.keypoints {
            let _ = writeln!(
                s,
                "  <keypoint name=\"{}\" link=\"{}\" xyz=\"{}\"/>",
                xml_escape(&k.name),
                xml_escape(&k.link),
                v(&k.offset)
            );
        }
        s.push_str("</robot>\n");
        s
    }

    /// One line per joint and keypoint, fixed precision, for golden files.
    pub fn canonical_dump(&self) -> String {
        let v = |v: &Vector3<f64>| format!("{:.6},{:.6},{:.6}", v.x, v.y, v.z);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "robot {} dof={} keypoints={} root={} base={}",
            self.name,
            self.dof(),
            self.n_keypoints(),
            self.keypoints[self.root_keypoint].name,
            self.links[self.base_link].name
        );
        for &ji in &self.topo_joints {
            let j = &self.joints[ji];
            let index = self.joint_state_index[ji]
                .map(|i| i.to_string())
                .unwrap_or_else(|| "-".into());
            let limits = match j.kind {
                JointKind::Fixed => "-".to_string(),
                _ => {
                    let l = j.effective_limits();
                    format!("{:.6},{:.6}", l.lower, l.upper)
                }
            };
            let _ = writeln!(
                s,
                "joint {} {} q={} parent={} child={} xyz={} rpy={} axis={} limits={}",
                j.name,
                j.kind.as_str(),
                index,
                j.parent,
                j.child,
                v(&j.origin.xyz),
                v(&j.origin.rpy),
                v(&j.axis),
                limits
            );
        }
        for (i, k) in self.keypoints.iter().enumerate() {
            let _ = writeln!(
                s,
                "keypoint {} {} link={} offset={}{}",
                i,
                k.name,
                k.link,
                v(&k.offset),
                if i == self.root_keypoint { " root" } else { "" }
            );
        }
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

// ---------------------------------------------------------------------------
// forward kinematics

/// Keypoints in the base frame for public-unit joint states.
pub fn base_keypoints(
    model: &RobotModel,
    q: &JointState,
) -> Result<Vec<Vector3<f64>>, KinematicsError> {
    Ok(model.base_keypoints_internal(&q.to_internal(model)?))
}

/// `P_i = R · X_i(q) + t` with the pose placing the base link.
pub fn forward_kinematics(
    model: &RobotModel,
    q: &JointState,
    pose: &RigidPose,
) -> Result<KeypointSet, KinematicsError> {
    rotation::ensure_rotation(&pose.rotation)?;
    let pts = base_keypoints(model, q)?
        .iter()
        .map(|x| pose.apply(x))
        .collect();
    Ok(KeypointSet::new(pts, KeypointFrame::FkAbsolute))
}

/// `P_i = R · (X_i(q) - X_root(q)) + t`: `t` is the camera-frame root keypoint.
pub fn holistic_keypoints(
    model: &RobotModel,
    q: &JointState,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> Result<KeypointSet, KinematicsError> {
    let pose = base_pose_from_root(model, q, rotation, translation)?;
    forward_kinematics(model, q, &pose)
}

/// Base-link pose that puts the root keypoint at `translation`.
pub fn base_pose_from_root(
    model: &RobotModel,
    q: &JointState,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> Result<RigidPose, KinematicsError> {
    let x = base_keypoints(model, q)?;
    let root = x[model.root_keypoint()];
    Ok(RigidPose::new(*rotation, translation - rotation * root))
}

/// Internal-unit variant used by the fitter: returns the keypoints and the
/// `3N × (J + 9)` Jacobian of the root-anchored keypoints with respect to
/// `(q [rad/mm], r6, t)`.
pub fn holistic_jacobian_internal(
    model: &RobotModel,
    q_internal: &[f64],
    r6: &Rotation6D,
    translation: &Vector3<f64>,
) -> Result<(Vec<Vector3<f64>>, DMatrix<f64>), KinematicsError> {
    model.check_dof(q_internal.len())?;
    let rot = r6_to_matrix(r6)?;
    let drot = r6_to_matrix_jacobian(r6)?;
    let (x, dx) = model.base_keypoint_derivatives(q_internal);
    let root = model.root_keypoint();
    let j = model.dof();
    let mut jac = DMatrix::zeros(3 * x.len(), j + 9);
    let mut points = Vec::with_capacity(x.len());
    for (k, xk) in x.iter().enumerate() {
        let rel = xk - x[root];
        points.push(rot * rel + translation);
        for s in 0..j {
            let col = rot * (dx[k][s] - dx[root][s]);
            jac.fixed_view_mut::<3, 1>(3 * k, s).copy_from(&col);
        }
        for (m, d) in drot.iter().enumerate() {
            jac.fixed_view_mut::<3, 1>(3 * k, j + m).copy_from(&(d * rel));
        }
        jac.fixed_view_mut::<3, 3>(3 * k, j + 6)
            .copy_from(&Matrix3::identity());
    }
    Ok((points, jac))
}

/// `3N × (J + 9)` Jacobian of [`forward_kinematics`] (base anchored) with
/// respect to `(q, r6, t)`; joint columns are per radian / per mm.
pub fn fk_jacobian(
    model: &RobotModel,
    q: &JointState,
    r6: &Rotation6D,
    _translation: &Vector3<f64>,
) -> Result<DMatrix<f64>, KinematicsError> {
    let q_internal = q.to_internal(model)?;
    let rot = r6_to_matrix(r6)?;
    let drot = r6_to_matrix_jacobian(r6)?;
    let (x, dx) = model.base_keypoint_derivatives(&q_internal);
    let j = model.dof();
    let mut jac = DMatrix::zeros(3 * x.len(), j + 9);
    for (k, xk) in x.iter().enumerate() {
        for s in 0..j {
            jac.fixed_view_mut::<3, 1>(3 * k, s)
                .copy_from(&(rot * dx[k][s]));
        }
        for (m, d) in drot.iter().enumerate() {
            jac.fixed_view_mut::<3, 1>(3 * k, j + m).copy_from(&(d * xk));
        }
        jac.fixed_view_mut::<3, 3>(3 * k, j + 6)
            .copy_from(&Matrix3::identity());
    }
    Ok(jac)
}

/// Jacobian of [`holistic_keypoints`] with respect to `(q, r6, t)`; joint
/// columns are per radian / per mm.
pub fn holistic_jacobian(
    model: &RobotModel,
    q: &JointState,
    r6: &Rotation6D,
    translation: &Vector3<f64>,
) -> Result<DMatrix<f64>, KinematicsError> {
    Ok(holistic_jacobian_internal(model, &q.to_internal(model)?, r6, translation)?.1)
}

pub fn clamp_to_limits(model: &RobotModel, q: &JointState) -> Result<JointState, KinematicsError> {
    model.check_dof(q.len())?;
    Ok(JointState(
        q.0.iter()
            .zip(model.state_joints())
            .map(|(v, j)| j.effective_limits().clamp(*v))
            .collect(),
    ))
}

/// Rotation from URDF roll/pitch/yaw (fixed axes X, Y, Z).
pub fn rpy_matrix(rpy: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_euler_angles(rpy.x, rpy.y, rpy.z).into_inner()
}
