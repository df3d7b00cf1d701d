//! Keyvectors and the human-to-robot hand dissimilarity energy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{FrameSet, KinematicChain};
use crate::se3::{Transform3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Keypoint {
    Index = 0,
    Middle = 1,
    Ring = 2,
    Thumb = 3,
    Palm = 4,
}

impl Keypoint {
    pub const ALL: [Keypoint; 5] = [
        Keypoint::Index,
        Keypoint::Middle,
        Keypoint::Ring,
        Keypoint::Thumb,
        Keypoint::Palm,
    ];

    pub fn name(self) -> &'static str {
        KEYPOINT_NAMES[self as usize]
    }
}

/// Keypoint frame names shared by the human skeleton and the robot chain.
pub const KEYPOINT_NAMES: [&str; 5] = ["index_tip", "middle_tip", "ring_tip", "thumb_tip", "palm"];

pub const NUM_KEYVECTORS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyVectorKind {
    FingerToPalm,
    InterFinger,
    FingerToThumb,
}

/// `(origin, destination, kind)` for each keyvector, in storage order.
pub const KEYVECTOR_PAIRS: [(Keypoint, Keypoint, KeyVectorKind); NUM_KEYVECTORS] = {
    use KeyVectorKind::*;
    use Keypoint::*;
    [
        (Index, Palm, FingerToPalm),
        (Middle, Palm, FingerToPalm),
        (Ring, Palm, FingerToPalm),
        (Thumb, Palm, FingerToPalm),
        (Index, Middle, InterFinger),
        (Index, Ring, InterFinger),
        (Middle, Ring, InterFinger),
        (Index, Thumb, FingerToThumb),
        (Middle, Thumb, FingerToThumb),
        (Ring, Thumb, FingerToThumb),
    ]
};

/// The ten keyvectors of one hand, each expressed in its origin keypoint's frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyVectorSet {
    pub vectors: [Vec3; NUM_KEYVECTORS],
}

impl KeyVectorSet {
    pub fn zeros() -> Self {
        KeyVectorSet {
            vectors: [Vec3::zeros(); NUM_KEYVECTORS],
        }
    }

    pub fn origin(i: usize) -> Keypoint {
        KEYVECTOR_PAIRS[i].0
    }

    pub fn destination(i: usize) -> Keypoint {
        KEYVECTOR_PAIRS[i].1
    }

    /// Each vector multiplied by its scaling constant.
    pub fn scaled(&self, c: &[f64; NUM_KEYVECTORS]) -> Self {
        let mut out = *self;
        for (v, s) in out.vectors.iter_mut().zip(c) {
            *v *= *s;
        }
        out
    }

    pub fn to_flat(&self) -> [f64; 3 * NUM_KEYVECTORS] {
        let mut out = [0.0; 3 * NUM_KEYVECTORS];
        for (i, v) in self.vectors.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
        }
        out
    }
}

/// Scaling constants applied to the robot keyvectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnergyConfigDoc")]
pub struct EnergyConfig {
    pub c: [f64; NUM_KEYVECTORS],
    /// Express keyvectors in the hand root frame instead of the origin
    /// keypoint's frame.
    pub root_frame: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig::from_groups(0.5, 0.8, 0.8)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnergyConfigDoc {
    #[serde(default)]
    c: Option<[f64; NUM_KEYVECTORS]>,
    #[serde(default)]
    finger_palm_scale: Option<f64>,
    #[serde(default)]
    inter_finger_scale: Option<f64>,
    #[serde(default)]
    finger_thumb_scale: Option<f64>,
    #[serde(default)]
    root_frame: bool,
}

impl TryFrom<EnergyConfigDoc> for EnergyConfig {
    type Error = Error;

    fn try_from(doc: EnergyConfigDoc) -> Result<Self> {
        let groups = [
            doc.finger_palm_scale,
            doc.inter_finger_scale,
            doc.finger_thumb_scale,
        ];
        let mut cfg = match doc.c {
            Some(c) => {
                if groups.iter().any(Option::is_some) {
                    return Err(Error::Config(
                        "energy: give either the full 'c' list or group scales, not both".into(),
                    ));
                }
                EnergyConfig { c, root_frame: false }
            }
            None => {
                let d = EnergyConfig::default();
                EnergyConfig::from_groups(
                    groups[0].unwrap_or(d.c[0]),
                    groups[1].unwrap_or(d.c[4]),
                    groups[2].unwrap_or(d.c[7]),
                )
            }
        };
        cfg.root_frame = doc.root_frame;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl EnergyConfig {
    pub fn from_groups(finger_palm: f64, inter_finger: f64, finger_thumb: f64) -> Self {
        let c = KEYVECTOR_PAIRS.map(|(_, _, kind)| match kind {
            KeyVectorKind::FingerToPalm => finger_palm,
            KeyVectorKind::InterFinger => inter_finger,
            KeyVectorKind::FingerToThumb => finger_thumb,
        });
        EnergyConfig { c, root_frame: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.iter().all(|c| c.is_finite() && *c > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "energy scaling constants must be positive, got {:?}",
                self.c
            )))
        }
    }
}

fn keyvectors_from_array(frames: &[Transform3; 5], root_frame: bool) -> KeyVectorSet {
    let vectors = KEYVECTOR_PAIRS.map(|(o, d, _)| {
        let (fo, fd) = (&frames[o as usize], &frames[d as usize]);
        let delta = fd.translation - fo.translation;
        if root_frame {
            delta
        } else {
            fo.rotation.matrix().tr_mul(&delta)
        }
    });
    KeyVectorSet { vectors }
}

fn frames_array(frames: &FrameSet) -> Result<[Transform3; 5]> {
    let mut out = [Transform3::identity(); 5];
    for (slot, name) in out.iter_mut().zip(KEYPOINT_NAMES) {
        *slot = *frames
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("frame set lacks keypoint '{name}'")))?;
    }
    Ok(out)
}

/// Keyvectors in origin-keypoint coordinates.
pub fn compute_keyvectors(frames: &FrameSet) -> Result<KeyVectorSet> {
    Ok(keyvectors_from_array(&frames_array(frames)?, false))
}

pub fn compute_keyvectors_with(frames: &FrameSet, cfg: &EnergyConfig) -> Result<KeyVectorSet> {
    Ok(keyvectors_from_array(&frames_array(frames)?, cfg.root_frame))
}

/// Human keyvectors for a pose, as the retargeters consume them.
pub fn human_keyvectors(
    model: &crate::human_model::HandSkeletonModel,
    pose: &crate::human_model::HumanHandPose,
    cfg: &EnergyConfig,
) -> Result<KeyVectorSet> {
    pose.validate()?;
    Ok(keyvectors_from_array(
        &model.keypoint_frames(pose)?,
        cfg.root_frame,
    ))
}

fn keypoint_links(chain: &KinematicChain) -> Result<[usize; 5]> {
    let mut out = [0usize; 5];
    for (slot, name) in out.iter_mut().zip(KEYPOINT_NAMES) {
        let k = chain.keypoint_index(name).ok_or_else(|| {
            Error::InvalidInput(format!("chain '{}' lacks keypoint '{name}'", chain.name()))
        })?;
        *slot = chain.keypoints()[k].1;
    }
    Ok(out)
}

/// Robot keyvectors at `q`.
pub fn robot_keyvectors(chain: &KinematicChain, q: &[f64], cfg: &EnergyConfig) -> Result<KeyVectorSet> {
    let links = keypoint_links(chain)?;
    let frames = chain.link_frames(q)?;
    Ok(keyvectors_from_array(&links.map(|l| frames[l]), cfg.root_frame))
}

/// Residuals `r_i = v_i^h - c_i v_i^a`, stacked to length 30, and optionally
/// their 30 x n Jacobian with respect to `q`.
pub fn residuals(
    human_kv: &KeyVectorSet,
    chain: &KinematicChain,
    q: &[f64],
    cfg: &EnergyConfig,
    with_jacobian: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let links = keypoint_links(chain)?;
    let frames = chain.link_frames(q)?;
    let kp = links.map(|l| frames[l]);
    let robot = keyvectors_from_array(&kp, cfg.root_frame);
    let mut r = DVector::zeros(3 * NUM_KEYVECTORS);
    for i in 0..NUM_KEYVECTORS {
        let ri = human_kv.vectors[i] - cfg.c[i] * robot.vectors[i];
        r.fixed_rows_mut::<3>(3 * i).copy_from(&ri);
    }
    if !with_jacobian {
        return Ok((r, None));
    }
    let screws = chain.joint_screws(&frames);
    let jac: Vec<_> = links
        .iter()
        .zip(&kp)
        .map(|(l, f)| chain.link_jacobian(*l, f, &screws))
        .collect();
    let n = chain.dof();
    let mut j = DMatrix::zeros(3 * NUM_KEYVECTORS, n);
    for (i, (o, d, _)) in KEYVECTOR_PAIRS.iter().enumerate() {
        let (o, d) = (*o as usize, *d as usize);
        let delta = kp[d].translation - kp[o].translation;
        let dpos = &jac[d].0 - &jac[o].0;
        for col in 0..n {
            let dp = dpos.column(col);
            let dv = if cfg.root_frame {
                dp.into_owned()
            } else {
                // v_k = a_k . delta, with a_k the origin frame's k-th axis
                let m = kp[o].rotation.matrix();
                Vec3::from_fn(|k, _| jac[o].1[k].column(col).dot(&delta) + m.column(k).dot(&dp))
            };
            j.fixed_view_mut::<3, 1>(3 * i, col).copy_from(&(-cfg.c[i] * dv));
        }
    }
    Ok((r, Some(j)))
}

/// `E = sum_i |v_i^h - c_i v_i^a|^2`, in square meters.
pub fn energy(human_kv: &KeyVectorSet, chain: &KinematicChain, q: &[f64], cfg: &EnergyConfig) -> Result<f64> {
    let (r, _) = residuals(human_kv, chain, q, cfg, false)?;
    Ok(r.norm_squared())
}

/// Energy and its gradient with respect to `q`.
pub fn energy_and_gradient(
    human_kv: &KeyVectorSet,
    chain: &KinematicChain,
    q: &[f64],
    cfg: &EnergyConfig,
) -> Result<(f64, DVector<f64>)> {
    let (r, j) = residuals(human_kv, chain, q, cfg, true)?;
    let j = j.expect("jacobian requested");
    Ok((r.norm_squared(), 2.0 * j.tr_mul(&r)))
}

pub fn energy_gradient(
    human_kv: &KeyVectorSet,
    chain: &KinematicChain,
    q: &[f64],
    cfg: &EnergyConfig,
) -> Result<DVector<f64>> {
    Ok(energy_and_gradient(human_kv, chain, q, cfg)?.1)
}
