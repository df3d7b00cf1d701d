//! Revolute kinematic chains: loading, forward kinematics and geometric
//! Jacobians of keypoint frames.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Matrix3xX;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::se3::{AxisAngle, Rotation3, Transform3, Vec3};

#[derive(Clone, Debug)]
pub struct Link {
    pub name: String,
    pub parent: Option<usize>,
    /// Fixed transform from the parent frame to this link's joint frame.
    pub offset: Transform3,
    pub joint: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Joint {
    pub link: usize,
    /// Unit axis in the link frame.
    pub axis: Vec3,
    pub lower: f64,
    pub upper: f64,
}

impl Joint {
    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.lower, self.upper)
    }
}

/// Immutable tree of links connected by revolute joints.
#[derive(Clone, Debug)]
pub struct KinematicChain {
    name: String,
    links: Vec<Link>,
    joints: Vec<Joint>,
    keypoints: Vec<(String, usize)>,
    /// `moves[link][joint]`: the joint is the link's own joint or an ancestor's.
    moves: Vec<Vec<bool>>,
}

/// Frames of every link and bound keypoint, expressed in the chain root frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    frames: BTreeMap<String, Transform3>,
}

impl FrameSet {
    pub fn new() -> Self {
        FrameSet {
            frames: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, frame: Transform3) {
        self.frames.insert(name.into(), frame);
    }

    pub fn get(&self, name: &str) -> Option<&Transform3> {
        self.frames.get(name)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Transform3)> {
        self.frames.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl Default for FrameSet {
    fn default() -> Self {
        FrameSet::new()
    }
}

/// Derivatives of one keypoint frame with respect to every joint angle.
#[derive(Clone, Debug)]
pub struct KeypointJacobian {
    pub name: String,
    /// d(origin)/dq, 3 x n.
    pub position: Matrix3xX<f64>,
    /// d(frame axis k)/dq for the x, y and z axes, each 3 x n.
    pub axes: [Matrix3xX<f64>; 3],
}

#[derive(Clone, Debug)]
pub struct Jacobian {
    pub keypoints: Vec<KeypointJacobian>,
}

impl Jacobian {
    pub fn dof(&self) -> usize {
        self.keypoints.first().map_or(0, |k| k.position.ncols())
    }

    pub fn is_empty(&self) -> bool {
        self.dof() == 0
    }

    pub fn get(&self, name: &str) -> Option<&KeypointJacobian> {
        self.keypoints.iter().find(|k| k.name == name)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainDoc {
    name: String,
    links: Vec<LinkDoc>,
    #[serde(default)]
    joints: Vec<JointDoc>,
    #[serde(default)]
    keypoints: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    #[serde(default)]
    offset: Option<OffsetDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct OffsetDoc {
    #[serde(default)]
    pub translation: Option<[f64; 3]>,
    #[serde(default)]
    pub rotation_axis_angle: Option<[f64; 4]>,
}

impl OffsetDoc {
    pub(crate) fn to_transform(&self, source: &str, field: &str) -> Result<Transform3> {
        let t = self.translation.unwrap_or([0.0; 3]);
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(source, field, "non-finite translation"));
        }
        let rotation = match self.rotation_axis_angle {
            None => Rotation3::identity(),
            Some([x, y, z, theta]) => {
                let aa = AxisAngle::new(Vec3::new(x, y, z), theta).map_err(|e| {
                    Error::parse(source, format!("{field}.rotation_axis_angle"), e.to_string())
                })?;
                Rotation3::from_axis_angle(&aa)
            }
        };
        Ok(Transform3::new(rotation, Vec3::from(t)))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    link: String,
    axis: [f64; 3],
    lower: f64,
    upper: f64,
}

/// Converts a TOML error into a parse error carrying the line number.
pub(crate) fn toml_error(source: &str, text: &str, err: toml::de::Error) -> Error {
    let location = match err.span() {
        Some(span) => format!(
            "line {}",
            text[..span.start.min(text.len())].lines().count().max(1)
        ),
        None => "document".to_string(),
    };
    Error::parse(source, location, err.message().to_string())
}

/// Parses and validates a chain document. `source` names the document in errors.
pub fn load_chain(source: &str, text: &str) -> Result<KinematicChain> {
    let doc: ChainDoc = toml::from_str(text).map_err(|e| toml_error(source, text, e))?;
    if doc.links.is_empty() {
        return Err(Error::parse(source, "links", "chain has no links"));
    }

    let mut index: HashMap<&str, usize> = HashMap::new();
    for (k, link) in doc.links.iter().enumerate() {
        if link.name.is_empty() {
            return Err(Error::parse(
                source,
                format!("links[{k}].name"),
                "empty link name",
            ));
        }
        if index.insert(link.name.as_str(), k).is_some() {
            return Err(Error::parse(
                source,
                format!("links[{k}].name"),
                format!("duplicate link name '{}'", link.name),
            ));
        }
    }

    let mut links = Vec::with_capacity(doc.links.len());
    for (k, link) in doc.links.iter().enumerate() {
        let field = format!("links[{k}]");
        let parent = match &link.parent {
            None => {
                if k != 0 {
                    return Err(Error::parse(
                        source,
                        format!("{field}.parent"),
                        "only the first link may omit its parent",
                    ));
                }
                None
            }
            Some(p) => {
                let Some(&pi) = index.get(p.as_str()) else {
                    return Err(Error::parse(
                        source,
                        format!("{field}.parent"),
                        format!("unknown parent link '{p}'"),
                    ));
                };
                if pi >= k {
                    let message = if reaches(&doc.links, &index, pi, k) {
                        format!("cyclic parentage through '{p}'")
                    } else {
                        format!("parent '{p}' must be listed before '{}'", link.name)
                    };
                    return Err(Error::parse(source, format!("{field}.parent"), message));
                }
                Some(pi)
            }
        };
        let offset = match &link.offset {
            Some(o) => o.to_transform(source, &format!("{field}.offset"))?,
            None => Transform3::identity(),
        };
        links.push(Link {
            name: link.name.clone(),
            parent,
            offset,
            joint: None,
        });
    }

    let mut joints = Vec::with_capacity(doc.joints.len());
    for (j, joint) in doc.joints.iter().enumerate() {
        let field = format!("joints[{j}]");
        let Some(&li) = index.get(joint.link.as_str()) else {
            return Err(Error::parse(
                source,
                format!("{field}.link"),
                format!("unknown link '{}'", joint.link),
            ));
        };
        if links[li].joint.is_some() {
            return Err(Error::parse(
                source,
                format!("{field}.link"),
                format!("link '{}' already has a joint", joint.link),
            ));
        }
        let axis = Vec3::from(joint.axis);
        let norm = axis.norm();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::parse(
                source,
                format!("{field}.axis"),
                "axis must be nonzero",
            ));
        }
        if !(joint.lower.is_finite() && joint.upper.is_finite()) {
            return Err(Error::parse(source, field, "non-finite joint limit"));
        }
        if joint.lower >= joint.upper {
            return Err(Error::parse(
                source,
                format!("{field}.lower"),
                format!(
                    "lower limit {} must be below upper limit {}",
                    joint.lower, joint.upper
                ),
            ));
        }
        links[li].joint = Some(j);
        joints.push(Joint {
            link: li,
            axis: axis / norm,
            lower: joint.lower,
            upper: joint.upper,
        });
    }

    let mut keypoints = Vec::with_capacity(doc.keypoints.len());
    for (name, link) in &doc.keypoints {
        let Some(&li) = index.get(link.as_str()) else {
            return Err(Error::parse(
                source,
                format!("keypoints.{name}"),
                format!("keypoint bound to unknown link '{link}'"),
            ));
        };
        if index.contains_key(name.as_str()) {
            return Err(Error::parse(
                source,
                format!("keypoints.{name}"),
                "keypoint name collides with a link name",
            ));
        }
        keypoints.push((name.clone(), li));
    }

    Ok(KinematicChain::from_parts(doc.name, links, joints, keypoints))
}

fn reaches(links: &[LinkDoc], index: &HashMap<&str, usize>, from: usize, target: usize) -> bool {
    let mut cur = from;
    for _ in 0..=links.len() {
        if cur == target {
            return true;
        }
        match links[cur].parent.as_deref().and_then(|p| index.get(p)) {
            Some(&p) => cur = p,
            None => return false,
        }
    }
    true
}

impl KinematicChain {
    fn from_parts(
        name: String,
        links: Vec<Link>,
        joints: Vec<Joint>,
        keypoints: Vec<(String, usize)>,
    ) -> Self {
        let mut moves = vec![vec![false; joints.len()]; links.len()];
        for k in 0..links.len() {
            if let Some(p) = links[k].parent {
                moves[k] = moves[p].clone();
            }
            if let Some(j) = links[k].joint {
                moves[k][j] = true;
            }
        }
        KinematicChain {
            name,
            links,
            joints,
            keypoints,
            moves,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn keypoints(&self) -> &[(String, usize)] {
        &self.keypoints
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn keypoint_index(&self, name: &str) -> Option<usize> {
        self.keypoints.iter().position(|(n, _)| n == name)
    }

    /// True when `joint` rotates `link` (its own joint or an ancestor's).
    pub fn joint_moves_link(&self, joint: usize, link: usize) -> bool {
        self.moves[link][joint]
    }

    pub fn lower_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.lower).collect()
    }

    pub fn upper_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.upper).collect()
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = j.clamp(*v);
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && q.iter()
                .zip(&self.joints)
                .all(|(v, j)| *v >= j.lower && *v <= j.upper)
    }

    fn check_q(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::InvalidInput(format!(
                "chain '{}' has {} joints, got {} angles",
                self.name,
                self.dof(),
                q.len()
            )));
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite joint angle".into()));
        }
        Ok(())
    }

    /// Root-frame transform of every link, in link order. Joint limits are
    /// deliberately not enforced.
    pub fn link_frames(&self, q: &[f64]) -> Result<Vec<Transform3>> {
        self.check_q(q)?;
        let mut frames: Vec<Transform3> = Vec::with_capacity(self.links.len());
        for link in &self.links {
            let mut local = link.offset;
            if let Some(j) = link.joint {
                let joint = &self.joints[j];
                local.rotation = local.rotation * Rotation3::exp(&(joint.axis * q[j]));
            }
            let frame = match link.parent {
                Some(p) => frames[p].compose(&local),
                None => local,
            };
            frames.push(frame);
        }
        Ok(frames)
    }

    /// Keypoint frames, in keypoint order.
    pub fn keypoint_frames(&self, q: &[f64]) -> Result<Vec<Transform3>> {
        let frames = self.link_frames(q)?;
        Ok(self.keypoints.iter().map(|(_, l)| frames[*l]).collect())
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<FrameSet> {
        let frames = self.link_frames(q)?;
        let mut set = FrameSet::new();
        for (link, frame) in self.links.iter().zip(&frames) {
            set.insert(link.name.clone(), *frame);
        }
        for (name, l) in &self.keypoints {
            set.insert(name.clone(), frames[*l]);
        }
        Ok(set)
    }

    /// World axis and origin of each joint for the given link frames.
    pub(crate) fn joint_screws(&self, frames: &[Transform3]) -> Vec<(Vec3, Vec3)> {
        self.joints
            .iter()
            .map(|j| {
                let f = &frames[j.link];
                (f.rotation * j.axis, f.translation)
            })
            .collect()
    }

    /// Geometric Jacobian of one link frame: columns `w x (p - p_j)` for the
    /// origin and `w x a_k` for each frame axis.
    pub(crate) fn link_jacobian(
        &self,
        link: usize,
        frame: &Transform3,
        screws: &[(Vec3, Vec3)],
    ) -> (Matrix3xX<f64>, [Matrix3xX<f64>; 3]) {
        let n = self.dof();
        let mut position = Matrix3xX::zeros(n);
        let mut axes = [Matrix3xX::zeros(n), Matrix3xX::zeros(n), Matrix3xX::zeros(n)];
        let m = frame.rotation.matrix();
        for (j, (w, origin)) in screws.iter().enumerate() {
            if !self.moves[link][j] {
                continue;
            }
            position.set_column(j, &w.cross(&(frame.translation - origin)));
            for (k, axis) in axes.iter_mut().enumerate() {
                axis.set_column(j, &w.cross(&m.column(k).into_owned()));
            }
        }
        (position, axes)
    }

    pub fn keypoint_jacobian(&self, q: &[f64]) -> Result<Jacobian> {
        let frames = self.link_frames(q)?;
        let screws = self.joint_screws(&frames);
        let keypoints = self
            .keypoints
            .iter()
            .map(|(name, l)| {
                let (position, axes) = self.link_jacobian(*l, &frames[*l], &screws);
                KeypointJacobian {
                    name: name.clone(),
                    position,
                    axes,
                }
            })
            .collect();
        Ok(Jacobian { keypoints })
    }

    /// Returns a copy whose root link is additionally offset by `root`.
    pub fn with_root_offset(&self, root: &Transform3) -> Self {
        let mut chain = self.clone();
        chain.links[0].offset = root.compose(&chain.links[0].offset);
        chain
    }

    /// Indices of the links above `link`, nearest first.
    pub fn ancestors(&self, link: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.links[link].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.links[p].parent;
        }
        out
    }
}
