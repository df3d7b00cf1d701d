//! Parametric human hand and body skeletons.
//!
//! These are skeletal stand-ins with MANO / SMPL-X parameter arities: a hand pose
//! is `(beta in R^10, theta in R^45, phi in R^3)` and a body pose carries 24 joint
//! rotations. Only keypoint frames and the wrist-to-torso transform are consumed
//! downstream, so no mesh is produced.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::energy::{Keypoint, KEYPOINT_NAMES};
use crate::error::{Error, Result};
use crate::kinematics::{toml_error, FrameSet, OffsetDoc};
use crate::se3::{kabsch_umeyama, AxisAngle, Rotation3, Transform3, Vec3};

pub const SHAPE_DIMS: usize = 10;
pub const HAND_JOINTS: usize = 15;
pub const HAND_POSE_DIMS: usize = 3 * HAND_JOINTS;
pub const BODY_JOINTS: usize = 24;
/// Spacing of the four correspondence points attached to each keypoint.
pub const CORRESPONDENCE_OFFSET: f64 = 0.05;
/// Shape coefficients beyond this magnitude are outside the sampler contract.
pub const BETA_LIMIT: f64 = 3.0;

/// Hand shape, finger pose and global orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanHandPose {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanBodyPose {
    pub beta: Vec<f64>,
    pub theta: Vec<Rotation3>,
    pub phi: Vec<f64>,
}

fn check_len(what: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::InvalidInput(format!(
            "{what} has {} entries, expected {n}",
            v.len()
        )));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains non-finite values")));
    }
    Ok(())
}

impl HumanHandPose {
    pub fn new(beta: Vec<f64>, theta: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        let pose = HumanHandPose { beta, theta, phi };
        pose.validate()?;
        Ok(pose)
    }

    /// Flat hand with mean shape.
    pub fn flat() -> Self {
        HumanHandPose {
            beta: vec![0.0; SHAPE_DIMS],
            theta: vec![0.0; HAND_POSE_DIMS],
            phi: vec![0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("hand beta", &self.beta, SHAPE_DIMS)?;
        check_len("hand theta", &self.theta, HAND_POSE_DIMS)?;
        check_len("hand phi", &self.phi, 3)?;
        if self.beta.iter().any(|b| b.abs() > BETA_LIMIT) {
            log::warn!("hand shape coefficient beyond +-{BETA_LIMIT}");
        }
        Ok(())
    }

    /// `concat(beta, theta)`: the 55-dimensional retargeter input.
    pub fn network_input(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.theta).copied().collect()
    }

    fn joint_rotation(&self, slot: usize) -> Rotation3 {
        Rotation3::exp(&Vec3::new(
            self.theta[3 * slot],
            self.theta[3 * slot + 1],
            self.theta[3 * slot + 2],
        ))
    }
}

impl HumanBodyPose {
    pub fn new(beta: Vec<f64>, theta: Vec<Rotation3>, phi: Vec<f64>) -> Result<Self> {
        let pose = HumanBodyPose { beta, theta, phi };
        pose.validate()?;
        Ok(pose)
    }

    pub fn rest() -> Self {
        HumanBodyPose {
            beta: vec![0.0; SHAPE_DIMS],
            theta: vec![Rotation3::identity(); BODY_JOINTS],
            phi: vec![0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("body beta", &self.beta, SHAPE_DIMS)?;
        check_len("body phi", &self.phi, 3)?;
        if self.theta.len() != BODY_JOINTS {
            return Err(Error::InvalidInput(format!(
                "body theta has {} rotations, expected {BODY_JOINTS}",
                self.theta.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Bone {
    name: String,
    parent: Option<usize>,
    offset: Transform3,
    pose_slot: Option<usize>,
    shape: [f64; SHAPE_DIMS],
    /// Per axis-angle component `[lower, upper]`.
    limits: Option<[[f64; 2]; 3]>,
    synergy: Option<String>,
}

#[derive(Clone, Debug)]
struct Skeleton {
    name: String,
    bones: Vec<Bone>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonDoc {
    name: String,
    bones: Vec<BoneDoc>,
    #[serde(default)]
    keypoints: BTreeMap<String, String>,
    #[serde(default)]
    torso: Option<String>,
    #[serde(default)]
    wrist: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoneDoc {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    #[serde(default)]
    offset: Option<OffsetDoc>,
    #[serde(default)]
    pose_slot: Option<usize>,
    #[serde(default)]
    shape: Option<[f64; SHAPE_DIMS]>,
    #[serde(default)]
    limits: Option<[[f64; 2]; 3]>,
    #[serde(default)]
    synergy: Option<String>,
}

impl Skeleton {
    fn parse(source: &str, doc: &SkeletonDoc, slots: usize) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut bones: Vec<Bone> = Vec::with_capacity(doc.bones.len());
        let mut used_slots = vec![false; slots];
        if doc.bones.is_empty() {
            return Err(Error::parse(source, "bones", "skeleton has no bones"));
        }
        for (k, b) in doc.bones.iter().enumerate() {
            let field = format!("bones[{k}]");
            if index.insert(b.name.as_str(), k).is_some() {
                return Err(Error::parse(
                    source,
                    format!("{field}.name"),
                    format!("duplicate bone '{}'", b.name),
                ));
            }
            let parent = match &b.parent {
                None if k == 0 => None,
                None => {
                    return Err(Error::parse(
                        source,
                        format!("{field}.parent"),
                        "only the first bone may omit its parent",
                    ))
                }
                Some(p) => match index.get(p.as_str()) {
                    Some(&pi) if pi < k => Some(pi),
                    _ => {
                        return Err(Error::parse(
                            source,
                            format!("{field}.parent"),
                            format!("parent '{p}' must be a bone listed earlier"),
                        ))
                    }
                },
            };
            let offset = match &b.offset {
                Some(o) => o.to_transform(source, &format!("{field}.offset"))?,
                None => Transform3::identity(),
            };
            if let Some(s) = b.pose_slot {
                if s >= slots {
                    return Err(Error::parse(
                        source,
                        format!("{field}.pose_slot"),
                        format!("slot {s} out of range 0..{slots}"),
                    ));
                }
                if std::mem::replace(&mut used_slots[s], true) {
                    return Err(Error::parse(
                        source,
                        format!("{field}.pose_slot"),
                        format!("slot {s} used twice"),
                    ));
                }
            }
            let shape = b.shape.unwrap_or([0.0; SHAPE_DIMS]);
            // Bone lengths must stay positive over the whole sampler range.
            let worst = 1.0 - BETA_LIMIT * shape.iter().map(|c| c.abs()).sum::<f64>();
            if !(worst > 0.0) {
                return Err(Error::parse(
                    source,
                    format!("{field}.shape"),
                    "shape coefficients allow non-positive bone length for |beta| <= 3",
                ));
            }
            if let Some(l) = &b.limits {
                if l.iter().any(|[lo, hi]| !(lo < hi)) {
                    return Err(Error::parse(
                        source,
                        format!("{field}.limits"),
                        "each limit needs lower < upper",
                    ));
                }
            }
            bones.push(Bone {
                name: b.name.clone(),
                parent,
                offset,
                pose_slot: b.pose_slot,
                shape,
                limits: b.limits,
                synergy: b.synergy.clone(),
            });
        }
        Ok(Skeleton {
            name: doc.name.clone(),
            bones,
        })
    }

    fn bone_index(&self, name: &str) -> Option<usize> {
        self.bones.iter().position(|b| b.name == name)
    }

    fn local(&self, bone: &Bone, beta: &[f64], rotation: Option<Rotation3>) -> Transform3 {
        let scale = 1.0 + bone.shape.iter().zip(beta).map(|(c, b)| c * b).sum::<f64>();
        let mut t = Transform3::new(bone.offset.rotation, bone.offset.translation * scale);
        if let Some(r) = rotation {
            t.rotation = t.rotation * r;
        }
        t
    }

    /// Frames of all bones relative to the root bone's parent frame.
    fn pose(&self, beta: &[f64], rotation: impl Fn(usize) -> Rotation3) -> Vec<Transform3> {
        let mut frames: Vec<Transform3> = Vec::with_capacity(self.bones.len());
        for bone in &self.bones {
            let local = self.local(bone, beta, bone.pose_slot.map(&rotation));
            let frame = match bone.parent {
                Some(p) => frames[p].compose(&local),
                None => local,
            };
            frames.push(frame);
        }
        frames
    }
}

/// Hand skeleton with keypoint bindings and per-keypoint correspondence
/// points in rest-pose palm coordinates.
#[derive(Clone, Debug)]
pub struct HandSkeletonModel {
    skeleton: Skeleton,
    /// Bone per canonical keypoint, in `Keypoint` order.
    keypoint_bones: [usize; 5],
    /// Four template points per keypoint (rest pose, mean shape).
    templates: [[Vec3; 4]; 5],
    rest_frames: Vec<Transform3>,
}

/// Local coordinates of the correspondence points in their keypoint frame.
pub fn correspondence_points() -> [Vec3; 4] {
    let d = CORRESPONDENCE_OFFSET;
    [
        Vec3::zeros(),
        Vec3::new(d, 0.0, 0.0),
        Vec3::new(0.0, d, 0.0),
        Vec3::new(0.0, 0.0, d),
    ]
}

impl HandSkeletonModel {
    pub fn load(source: &str, text: &str) -> Result<Self> {
        let doc: SkeletonDoc = toml::from_str(text).map_err(|e| toml_error(source, text, e))?;
        let skeleton = Skeleton::parse(source, &doc, HAND_JOINTS)?;
        let mut keypoint_bones = [0usize; 5];
        for (k, name) in KEYPOINT_NAMES.iter().enumerate() {
            let Some(bone) = doc.keypoints.get(*name) else {
                return Err(Error::parse(
                    source,
                    "keypoints",
                    format!("missing keypoint binding '{name}'"),
                ));
            };
            let Some(bi) = skeleton.bone_index(bone) else {
                return Err(Error::parse(
                    source,
                    format!("keypoints.{name}"),
                    format!("unknown bone '{bone}'"),
                ));
            };
            keypoint_bones[k] = bi;
        }
        let rest_frames = skeleton.pose(&[0.0; SHAPE_DIMS], |_| Rotation3::identity());
        let local = correspondence_points();
        let templates = keypoint_bones.map(|b| local.map(|p| rest_frames[b].transform_point(&p)));
        Ok(HandSkeletonModel {
            skeleton,
            keypoint_bones,
            templates,
            rest_frames,
        })
    }

    pub fn name(&self) -> &str {
        &self.skeleton.name
    }

    /// Frames of every bone in the canonical palm frame.
    pub fn bone_frames(&self, pose: &HumanHandPose) -> Vec<Transform3> {
        self.skeleton.pose(&pose.beta, |slot| pose.joint_rotation(slot))
    }

    pub fn bone_names(&self) -> impl Iterator<Item = &str> {
        self.skeleton.bones.iter().map(|b| b.name.as_str())
    }

    pub fn keypoint_bone(&self, k: Keypoint) -> usize {
        self.keypoint_bones[k as usize]
    }

    /// Anatomical limits of a pose slot's three axis-angle components.
    pub fn slot_limits(&self, slot: usize) -> Option<[[f64; 2]; 3]> {
        self.skeleton
            .bones
            .iter()
            .find(|b| b.pose_slot == Some(slot))
            .and_then(|b| b.limits)
    }

    /// Keypoint frames in the canonical palm frame, fitted from the posed
    /// correspondence points.
    pub fn keypoint_frames(&self, pose: &HumanHandPose) -> Result<[Transform3; 5]> {
        let frames = self.bone_frames(pose);
        let local = correspondence_points();
        let mut out = [Transform3::identity(); 5];
        for (k, bone) in self.keypoint_bones.iter().enumerate() {
            // Skin the template points rigidly with their bone.
            let skin = frames[*bone].compose(&self.rest_frames[*bone].inverse());
            let posed = self.templates[k].map(|p| skin.transform_point(&p));
            out[k] = kabsch_umeyama(&local, &posed)?;
        }
        Ok(out)
    }
}

/// The five canonical keypoint frames of a human hand pose.
pub fn hand_keypoint_frames(model: &HandSkeletonModel, pose: &HumanHandPose) -> Result<FrameSet> {
    pose.validate()?;
    let frames = model.keypoint_frames(pose)?;
    let mut set = FrameSet::new();
    for (name, f) in KEYPOINT_NAMES.iter().zip(frames) {
        set.insert(*name, f);
    }
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct BodySkeletonModel {
    skeleton: Skeleton,
    torso: usize,
    wrist: usize,
    /// Bones strictly after the torso on the path to the wrist.
    path: Vec<usize>,
}

impl BodySkeletonModel {
    pub fn load(source: &str, text: &str) -> Result<Self> {
        let doc: SkeletonDoc = toml::from_str(text).map_err(|e| toml_error(source, text, e))?;
        let skeleton = Skeleton::parse(source, &doc, BODY_JOINTS)?;
        let find = |field: &str, name: &Option<String>| -> Result<usize> {
            let name = name
                .as_deref()
                .ok_or_else(|| Error::parse(source, field, "missing"))?;
            skeleton
                .bone_index(name)
                .ok_or_else(|| Error::parse(source, field, format!("unknown bone '{name}'")))
        };
        let torso = find("torso", &doc.torso)?;
        let wrist = find("wrist", &doc.wrist)?;
        let mut path = Vec::new();
        let mut cur = Some(wrist);
        while let Some(b) = cur {
            if b == torso {
                break;
            }
            path.push(b);
            cur = skeleton.bones[b].parent;
        }
        if cur != Some(torso) {
            return Err(Error::parse(
                source,
                "wrist",
                "wrist bone does not descend from the torso bone",
            ));
        }
        path.reverse();
        Ok(BodySkeletonModel {
            skeleton,
            torso,
            wrist,
            path,
        })
    }

    /// World frames of all bones, including the global orientation `phi`.
    pub fn world_frames(&self, pose: &HumanBodyPose) -> Result<Vec<Transform3>> {
        pose.validate()?;
        let root = Rotation3::from_axis_angle(&AxisAngle::from_rotation_vector(&Vec3::new(
            pose.phi[0],
            pose.phi[1],
            pose.phi[2],
        ))?);
        let frames = self.skeleton.pose(&pose.beta, |slot| pose.theta[slot]);
        Ok(frames
            .iter()
            .map(|f| Transform3::from_rotation(root).compose(f))
            .collect())
    }

    pub fn torso_in_world(&self, pose: &HumanBodyPose) -> Result<Transform3> {
        Ok(self.world_frames(pose)?[self.torso])
    }

    pub fn wrist_in_world(&self, pose: &HumanBodyPose) -> Result<Transform3> {
        Ok(self.world_frames(pose)?[self.wrist])
    }

    /// Names of the bones from the torso (exclusive) to the wrist (inclusive).
    pub fn path_names(&self) -> Vec<&str> {
        self.path
            .iter()
            .map(|b| self.skeleton.bones[*b].name.as_str())
            .collect()
    }

    pub fn path_bone_offsets(&self) -> Vec<(Transform3, Option<usize>)> {
        self.path
            .iter()
            .map(|b| {
                let bone = &self.skeleton.bones[*b];
                (bone.offset, bone.pose_slot)
            })
            .collect()
    }
}

/// Right wrist frame expressed in the torso frame, chaining bone offsets and
/// joint rotations from the torso down to the wrist.
pub fn wrist_relative_to_torso(model: &BodySkeletonModel, pose: &HumanBodyPose) -> Result<Transform3> {
    pose.validate()?;
    let mut t = Transform3::identity();
    for b in &model.path {
        let bone = &model.skeleton.bones[*b];
        let local = model
            .skeleton
            .local(bone, &pose.beta, bone.pose_slot.map(|s| pose.theta[s]));
        t = t.compose(&local);
    }
    Ok(t)
}

/// Sampler settings for synthetic hand poses.
#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Correlation between flexion angles of joints in one finger.
    pub synergy_correlation: f64,
    /// Half the anatomical range, in standard deviations. Draws are truncated
    /// symmetrically at this many deviations, so the mean is the range midpoint.
    pub limit_sigmas: f64,
    pub beta_sd: f64,
    pub beta_clip: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            synergy_correlation: 0.8,
            limit_sigmas: 2.0,
            beta_sd: 0.5,
            beta_clip: BETA_LIMIT,
        }
    }
}

/// Mean and standard deviation the sampler uses for one theta component.
pub fn component_distribution(limits: [f64; 2], cfg: &SamplerConfig) -> (f64, f64) {
    let [lo, hi] = limits;
    ((lo + hi) / 2.0, (hi - lo) / (2.0 * cfg.limit_sigmas))
}

/// Seeded generator of synthetic hand poses. Each instance owns its stream.
pub struct HandPoseSampler<'a> {
    model: &'a HandSkeletonModel,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
    /// Pose slots grouped by synergy label.
    groups: Vec<Vec<usize>>,
}

impl<'a> HandPoseSampler<'a> {
    pub fn new(model: &'a HandSkeletonModel, cfg: SamplerConfig, seed: u64) -> Self {
        let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut singles = Vec::new();
        for slot in 0..HAND_JOINTS {
            let bone = model.skeleton.bones.iter().find(|b| b.pose_slot == Some(slot));
            match bone.and_then(|b| b.synergy.clone()) {
                Some(label) => by_label.entry(label).or_default().push(slot),
                None => singles.push(vec![slot]),
            }
        }
        let mut groups: Vec<Vec<usize>> = by_label.into_values().collect();
        groups.extend(singles);
        HandPoseSampler {
            model,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            groups,
        }
    }

    fn truncated_normal(&mut self, bound: f64) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= bound {
                return z;
            }
        }
    }

    pub fn sample(&mut self) -> HumanHandPose {
        let k = self.cfg.limit_sigmas;
        let rho = self.cfg.synergy_correlation.clamp(0.0, 1.0);
        let mut theta = vec![0.0; HAND_POSE_DIMS];
        let groups = self.groups.clone();
        for group in &groups {
            // Flexion (component y) shares one latent curl across the group.
            let flex = loop {
                let common: f64 = StandardNormal.sample(&mut self.rng);
                let draws: Vec<f64> = group
                    .iter()
                    .map(|_| {
                        let own: f64 = StandardNormal.sample(&mut self.rng);
                        rho.sqrt() * common + (1.0 - rho).sqrt() * own
                    })
                    .collect();
                if draws.iter().all(|z| z.abs() <= k) {
                    break draws;
                }
            };
            for (slot, zf) in group.iter().zip(flex) {
                let limits = self.model.slot_limits(*slot).unwrap_or([[-0.1, 0.1]; 3]);
                for c in 0..3 {
                    let z = if c == 1 { zf } else { self.truncated_normal(k) };
                    let (mean, sd) = component_distribution(limits[c], &self.cfg);
                    theta[3 * slot + c] = (mean + sd * z).clamp(limits[c][0], limits[c][1]);
                }
            }
        }
        let beta = (0..SHAPE_DIMS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * self.cfg.beta_sd).clamp(-self.cfg.beta_clip, self.cfg.beta_clip)
            })
            .collect();
        let axis = loop {
            let v = Vec3::new(
                self.rng.random_range(-1.0..1.0),
                self.rng.random_range(-1.0..1.0),
                self.rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        let angle = self.rng.random_range(0.0..std::f64::consts::PI);
        let phi = (axis * angle).iter().copied().collect();
        HumanHandPose { beta, theta, phi }
    }

    pub fn sample_n(&mut self, n: usize) -> Vec<HumanHandPose> {
        (0..n).map(|_| self.sample()).collect()
    }
}

/// One pose from a fresh generator seeded with `seed`.
pub fn sample_hand_pose(model: &HandSkeletonModel, seed: u64, cfg: &SamplerConfig) -> HumanHandPose {
    HandPoseSampler::new(model, cfg.clone(), seed).sample()
}

/// Body poses for synthetic streams: small perturbations of the rest pose on
/// the arm path.
pub fn sample_body_pose(rng: &mut impl Rng, spread: f64) -> HumanBodyPose {
    let mut pose = HumanBodyPose::rest();
    for slot in [14usize, 17, 19, 21] {
        let v = Vec3::new(
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
        );
        pose.theta[slot] = Rotation3::exp(&v);
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{human_body, human_hand};
    use nalgebra::Matrix4;
    use std::f64::consts::FRAC_PI_2;

    fn random_pose(rng: &mut ChaCha8Rng) -> HumanHandPose {
        HumanHandPose {
            beta: (0..10).map(|_| rng.random_range(-2.0..2.0)).collect(),
            theta: (0..45).map(|_| rng.random_range(-1.0..1.0)).collect(),
            phi: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    #[test]
    fn flat_hand_palm_frame_is_identity() {
        let model = human_hand();
        let frames = hand_keypoint_frames(&model, &HumanHandPose::flat()).unwrap();
        let palm = frames.get("palm").unwrap();
        assert!((palm.to_homogeneous() - Matrix4::identity()).abs().max() < 1e-12);
        assert_eq!(frames.len(), 5);
    }

    #[test]
    fn flat_hand_fingertips_above_palm() {
        let model = human_hand();
        let frames = hand_keypoint_frames(&model, &HumanHandPose::flat()).unwrap();
        let palm_z = frames.get("palm").unwrap().translation.z;
        for k in ["index_tip", "middle_tip", "ring_tip", "thumb_tip"] {
            assert!(frames.get(k).unwrap().translation.z > palm_z, "{k}");
        }
    }

    #[test]
    fn keypoint_origins_match_bone_positions() {
        let model = human_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let bones = model.bone_frames(&pose);
            let frames = model.keypoint_frames(&pose).unwrap();
            for k in Keypoint::ALL {
                let direct = bones[model.keypoint_bone(k)];
                assert!((frames[k as usize].translation - direct.translation).norm() < 1e-9);
                assert!(
                    (frames[k as usize].rotation.matrix() - direct.rotation.matrix())
                        .abs()
                        .max()
                        < 1e-9
                );
            }
        }
    }

    #[test]
    fn keypoint_frames_ignore_global_orientation() {
        let model = human_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let mut turned = pose.clone();
            turned.phi = vec![0.3, -1.2, 2.0];
            assert_eq!(
                hand_keypoint_frames(&model, &pose).unwrap(),
                hand_keypoint_frames(&model, &turned).unwrap()
            );
        }
    }

    #[test]
    fn longer_fingers_lengthen_finger_to_palm_vectors() {
        let model = human_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let fingers = [Keypoint::Index, Keypoint::Middle, Keypoint::Ring, Keypoint::Thumb];
        let norms = |pose: &HumanHandPose| {
            let f = model.keypoint_frames(pose).unwrap();
            fingers.map(|k| (f[k as usize].translation - f[Keypoint::Palm as usize].translation).norm())
        };
        // global size direction, any pose
        for _ in 0..50 {
            let mut pose = random_pose(&mut rng);
            pose.beta[0] = -1.0;
            let small = norms(&pose);
            pose.beta[0] = 1.0;
            let large = norms(&pose);
            for (s, l) in small.iter().zip(&large) {
                assert!(l > s);
            }
        }
        // finger length direction on the flat hand
        let mut pose = HumanHandPose::flat();
        let mut prev = norms(&pose);
        for b in [-2.0, -1.0, 0.5, 1.5, 3.0] {
            pose.beta[1] = b;
            let cur = norms(&pose);
            if b > -2.0 {
                for (p, c) in prev.iter().zip(&cur).take(3) {
                    assert!(c > p);
                }
            }
            prev = cur;
        }
    }

    #[test]
    fn sampler_is_deterministic_and_within_limits() {
        let model = human_hand();
        let cfg = SamplerConfig::default();
        assert_eq!(
            sample_hand_pose(&model, 42, &cfg),
            sample_hand_pose(&model, 42, &cfg)
        );
        assert_ne!(
            sample_hand_pose(&model, 42, &cfg),
            sample_hand_pose(&model, 43, &cfg)
        );

        let mut sampler = HandPoseSampler::new(&model, cfg.clone(), 5);
        let poses = sampler.sample_n(10_000);
        let mut sums = vec![0.0; HAND_POSE_DIMS];
        for pose in &poses {
            for slot in 0..HAND_JOINTS {
                let lim = model.slot_limits(slot).unwrap();
                for c in 0..3 {
                    let v = pose.theta[3 * slot + c];
                    assert!(v >= lim[c][0] && v <= lim[c][1]);
                    sums[3 * slot + c] += v;
                }
            }
            assert!(pose.beta.iter().all(|b| b.abs() <= BETA_LIMIT));
        }
        // empirical mean within 3 standard errors of the configured mean
        let n = poses.len() as f64;
        for slot in 0..HAND_JOINTS {
            let lim = model.slot_limits(slot).unwrap();
            for c in 0..3 {
                let (mean, sd) = component_distribution(lim[c], &cfg);
                let got = sums[3 * slot + c] / n;
                assert!(
                    (got - mean).abs() <= 3.0 * sd / n.sqrt(),
                    "slot {slot} comp {c}: {got} vs {mean}"
                );
            }
        }
    }

    #[test]
    fn sampler_couples_finger_flexion() {
        let model = human_hand();
        let mut sampler = HandPoseSampler::new(&model, SamplerConfig::default(), 9);
        let poses = sampler.sample_n(5000);
        let a: Vec<f64> = poses.iter().map(|p| p.theta[1]).collect();
        let b: Vec<f64> = poses.iter().map(|p| p.theta[4]).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>();
        let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>();
        assert!(cov / (va * vb).sqrt() > 0.5);
    }

    #[test]
    fn rest_pose_wrist_offset() {
        let model = human_body();
        let t = wrist_relative_to_torso(&model, &HumanBodyPose::rest()).unwrap();
        let expected: Transform3 = model
            .path_bone_offsets()
            .iter()
            .fold(Transform3::identity(), |acc, (o, _)| acc.compose(o));
        assert!((t.to_homogeneous() - expected.to_homogeneous()).abs().max() < 1e-15);
        assert_eq!(
            model.path_names(),
            ["right_collar", "right_shoulder", "right_elbow", "right_wrist"]
        );
    }

    #[test]
    fn shoulder_rotation_swings_wrist() {
        let model = human_body();
        let rest = HumanBodyPose::rest();
        let mut turned = rest.clone();
        turned.theta[17] = Rotation3::about_z(FRAC_PI_2);
        let a = wrist_relative_to_torso(&model, &rest).unwrap();
        let b = wrist_relative_to_torso(&model, &turned).unwrap();
        // shoulder joint position in the torso frame
        let offsets = model.path_bone_offsets();
        let shoulder = offsets[0].0.compose(&offsets[1].0).translation;
        let expected = Rotation3::about_z(FRAC_PI_2) * (a.translation - shoulder) + shoulder;
        assert!((b.translation - expected).norm() < 1e-12);
        let torso = model.torso_in_world(&turned).unwrap();
        assert_eq!(torso, model.torso_in_world(&rest).unwrap());
    }

    fn body_oracle(model: &BodySkeletonModel, pose: &HumanBodyPose) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        for (offset, slot) in model.path_bone_offsets() {
            m *= offset.to_homogeneous();
            if let Some(s) = slot {
                m *= Transform3::from_rotation(pose.theta[s]).to_homogeneous();
            }
        }
        m
    }

    fn random_body(rng: &mut ChaCha8Rng) -> HumanBodyPose {
        let mut pose = HumanBodyPose::rest();
        for r in pose.theta.iter_mut() {
            *r = Rotation3::exp(&Vec3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            ));
        }
        pose.phi = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        pose
    }

    #[test]
    fn wrist_matches_matrix_chain_oracle() {
        let model = human_body();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..100 {
            let pose = random_body(&mut rng);
            let got = wrist_relative_to_torso(&model, &pose).unwrap();
            assert!((got.to_homogeneous() - body_oracle(&model, &pose)).abs().max() < 1e-9);
        }
    }

    #[test]
    fn relative_wrist_composes_with_torso() {
        let model = human_body();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..100 {
            let mut pose = random_body(&mut rng);
            pose.beta = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let rel = wrist_relative_to_torso(&model, &pose).unwrap();
            let torso = model.torso_in_world(&pose).unwrap();
            let wrist = model.wrist_in_world(&pose).unwrap();
            let composed = torso.compose(&rel);
            assert!((composed.to_homogeneous() - wrist.to_homogeneous()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn pose_arity_checked() {
        assert!(HumanHandPose::new(vec![0.0; 10], vec![0.0; 44], vec![0.0; 3]).is_err());
        assert!(HumanBodyPose::new(vec![0.0; 10], vec![Rotation3::identity(); 23], vec![0.0; 3]).is_err());
    }

    #[test]
    fn skeleton_rejects_shape_that_can_collapse_a_bone() {
        let text = r#"
name = "bad"
[keypoints]
[[bones]]
name = "root"
[[bones]]
name = "b"
parent = "root"
shape = [0.2, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
"#;
        let err = BodySkeletonModel::load("bad", text).unwrap_err().to_string();
        assert!(err.contains("bones[1].shape"), "{err}");
    }
}
