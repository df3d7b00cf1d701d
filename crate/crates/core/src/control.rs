//! Command smoothing: outlier clipping, EMA filtering, waypoint
//! interpolation, selectively damped least-squares IK for the arm and
//! interpolated joint streaming for the hand.

use nalgebra::{DMatrix, DVector, Matrix6xX, Vector6};
use serde::{Deserialize, Serialize};

use crate::body_retarget::EndEffectorTarget;
use crate::error::{Error, Result};
use crate::kinematics::KinematicChain;
use crate::se3::{Rotation3, Transform3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IkMethod {
    Sdls,
    /// Plain damped least squares, kept for debugging.
    Dls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkSettings {
    pub method: IkMethod,
    pub max_iters: usize,
    pub pos_tol_m: f64,
    pub rot_tol_rad: f64,
    /// Damping factor of the plain DLS update.
    pub damping: f64,
    /// Per-joint cap on the change of one SDLS iteration (rad).
    pub gamma_max: f64,
}

impl Default for IkSettings {
    fn default() -> Self {
        IkSettings {
            method: IkMethod::Sdls,
            max_iters: 200,
            pos_tol_m: 5e-4,
            rot_tol_rad: 0.004,
            damping: 0.05,
            gamma_max: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl IkSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.max_iters == 0 {
            return Err(Error::Config("ik.max_iters must be > 0".into()));
        }
        if !positive(self.pos_tol_m) || !positive(self.rot_tol_rad) {
            return Err(Error::Config("ik tolerances must be positive".into()));
        }
        if !positive(self.damping) || !positive(self.gamma_max) {
            return Err(Error::Config(
                "ik.damping and ik.gamma_max must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub alpha: f64,
    pub clip_pos_m: f64,
    pub clip_rot_rad: f64,
    pub max_step_pos_m: f64,
    pub max_step_rot_rad: f64,
    pub hand_max_joint_step_rad: f64,
    pub ik: IkSettings,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            alpha: 0.25,
            clip_pos_m: 0.10,
            clip_rot_rad: 0.5,
            max_step_pos_m: 0.01,
            max_step_rot_rad: 0.05,
            hand_max_joint_step_rad: 0.05,
            ik: IkSettings::default(),
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "control.alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("clip_pos_m", self.clip_pos_m),
            ("clip_rot_rad", self.clip_rot_rad),
            ("max_step_pos_m", self.max_step_pos_m),
            ("max_step_rot_rad", self.max_step_rot_rad),
            ("hand_max_joint_step_rad", self.hand_max_joint_step_rad),
        ] {
            if !positive(v) {
                return Err(Error::Config(format!("control.{name} must be positive, got {v}")));
            }
        }
        self.ik.validate()
    }

    pub fn smoother(&self) -> Result<SmootherState> {
        SmootherState::new(self.alpha, self.clip_pos_m, self.clip_rot_rad)
    }

    pub fn max_step(&self) -> MaxStep {
        MaxStep {
            position: self.max_step_pos_m,
            rotation: self.max_step_rot_rad,
        }
    }
}

/// Filter state of one end-effector stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SmootherState {
    pub p_ema: Option<Transform3>,
    alpha: f64,
    clip_pos: f64,
    clip_rot: f64,
}

impl SmootherState {
    pub fn new(alpha: f64, clip_pos: f64, clip_rot: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
        }
        if !(clip_pos > 0.0 && clip_rot > 0.0) {
            return Err(Error::Config("clip thresholds must be positive".into()));
        }
        Ok(SmootherState {
            p_ema: None,
            alpha,
            clip_pos,
            clip_rot,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn clip_thresholds(&self) -> (f64, f64) {
        (self.clip_pos, self.clip_rot)
    }
}

/// Limits the jump from `current` to `proposed`: the translation delta is
/// shortened along its direction and the rotation delta about its axis.
pub fn clip_outlier(current: &Transform3, proposed: &Transform3, state: &SmootherState) -> Transform3 {
    let dp = proposed.translation - current.translation;
    let d = dp.norm();
    let translation = if d > state.clip_pos {
        current.translation + dp * (state.clip_pos / d)
    } else {
        proposed.translation
    };
    let delta = (proposed.rotation * current.rotation.inverse()).log();
    let angle = delta.norm();
    let rotation = if angle > state.clip_rot {
        Rotation3::exp(&(delta * (state.clip_rot / angle))) * current.rotation
    } else {
        proposed.rotation
    };
    Transform3::new(rotation, translation)
}

/// `P_ema <- alpha * P_new + (1 - alpha) * P_ema`, with the rotation moved
/// the fraction `alpha` along the geodesic. The first call adopts `p_new`.
pub fn ema_update(state: &mut SmootherState, p_new: &Transform3) -> Transform3 {
    let next = match state.p_ema {
        None => *p_new,
        Some(prev) => Transform3::new(
            prev.rotation.slerp(&p_new.rotation, state.alpha),
            p_new.translation * state.alpha + prev.translation * (1.0 - state.alpha),
        ),
    };
    state.p_ema = Some(next);
    next
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxStep {
    pub position: f64,
    pub rotation: f64,
}

/// Relative slack so that e.g. a 0.30000000000000004 rad move still splits
/// into three 0.1 rad steps.
const STEP_SLACK: f64 = 1e-12;

/// Smallest `n` with `total / n <= max` for every (total, max) pair.
fn step_count(parts: &[(f64, f64)]) -> usize {
    let fits = |n: usize| {
        parts
            .iter()
            .all(|&(total, max)| total / n as f64 <= max * (1.0 + STEP_SLACK))
    };
    let mut n = parts
        .iter()
        .map(|&(total, max)| (total / (max * (1.0 + STEP_SLACK))).ceil())
        .fold(1.0f64, f64::max) as usize;
    while !fits(n) {
        n += 1;
    }
    while n > 1 && fits(n - 1) {
        n -= 1;
    }
    n
}

/// Equally spaced waypoints from `from` (excluded) to `to` (included).
pub fn interpolate_waypoints(
    from: &Transform3,
    to: &Transform3,
    max_step: MaxStep,
) -> Result<Vec<Transform3>> {
    if !(max_step.position > 0.0 && max_step.rotation > 0.0) {
        return Err(Error::InvalidInput("max_step components must be positive".into()));
    }
    let dp = to.translation - from.translation;
    let angle = from.rotation.angle_to(&to.rotation);
    let n = step_count(&[(dp.norm(), max_step.position), (angle, max_step.rotation)]);
    let mut out = Vec::with_capacity(n);
    for k in 1..n {
        let t = k as f64 / n as f64;
        out.push(Transform3::new(
            from.rotation.slerp(&to.rotation, t),
            from.translation + dp * t,
        ));
    }
    out.push(*to);
    Ok(out)
}

/// Per-joint linear interpolation from `current` (excluded) to `target`
/// (included).
pub fn stream_hand_command(current: &[f64], target: &[f64], max_joint_step: f64) -> Result<Vec<Vec<f64>>> {
    if current.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "joint vectors differ in length: {} vs {}",
            current.len(),
            target.len()
        )));
    }
    if !(max_joint_step > 0.0) {
        return Err(Error::InvalidInput("max_joint_step must be positive".into()));
    }
    let parts: Vec<(f64, f64)> = current
        .iter()
        .zip(target)
        .map(|(c, t)| ((t - c).abs(), max_joint_step))
        .collect();
    let n = step_count(&parts);
    let mut out = Vec::with_capacity(n);
    for k in 1..n {
        let s = k as f64 / n as f64;
        out.push(current.iter().zip(target).map(|(c, t)| c + (t - c) * s).collect());
    }
    out.push(target.to_vec());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkResult {
    pub q: Vec<f64>,
    pub converged: bool,
    pub position_error: f64,
    pub rotation_error: f64,
    pub iterations: usize,
}

struct PoseError {
    e: Vector6<f64>,
    pos: f64,
    rot: f64,
}

fn pose_error(current: &Transform3, target: &Transform3) -> PoseError {
    let dp = target.translation - current.translation;
    let dr = (target.rotation * current.rotation.inverse()).log();
    PoseError {
        e: Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z),
        pos: dp.norm(),
        rot: dr.norm(),
    }
}

fn end_effector(chain: &KinematicChain) -> Result<usize> {
    chain
        .keypoints()
        .first()
        .map(|(_, l)| *l)
        .ok_or_else(|| Error::InvalidInput(format!("chain '{}' has no end-effector keypoint", chain.name())))
}

/// World-frame geometric Jacobian: linear velocity rows over angular rows.
fn geometric_jacobian(chain: &KinematicChain, q: &[f64], ee: usize) -> Result<(Transform3, Matrix6xX<f64>)> {
    let frames = chain.link_frames(q)?;
    let screws = chain.joint_screws(&frames);
    let p = frames[ee].translation;
    let mut j = Matrix6xX::zeros(q.len());
    for (k, (w, o)) in screws.iter().enumerate() {
        if chain.joint_moves_link(k, ee) {
            let v = w.cross(&(p - o));
            j.fixed_view_mut::<3, 1>(0, k).copy_from(&v);
            j.fixed_view_mut::<3, 1>(3, k).copy_from(w);
        }
    }
    Ok((frames[ee], j))
}

fn clamp_max_abs(v: &mut DVector<f64>, cap: f64) {
    let m = v.amax();
    if m > cap {
        *v *= cap / m;
    }
}

/// One selectively damped step: each singular direction gets its own cap
/// derived from how far a unit change there moves the end effector.
fn sdls_step(j: &Matrix6xX<f64>, e: &Vector6<f64>, gamma_max: f64) -> DVector<f64> {
    let n = j.ncols();
    let jd = DMatrix::from_column_slice(6, n, j.as_slice());
    let svd = jd.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let rho: Vec<f64> = (0..n)
        .map(|c| j.fixed_view::<3, 1>(0, c).norm() + j.fixed_view::<3, 1>(3, c).norm())
        .collect();
    let eps = 1e-10 * svd.singular_values.max().max(1e-300);
    let mut total = DVector::zeros(n);
    for (i, &sigma) in svd.singular_values.iter().enumerate() {
        if sigma <= eps {
            continue;
        }
        let ui = u.column(i);
        let vi = v_t.row(i).transpose();
        let alpha = ui.dot(e);
        let n_i = ui.rows(0, 3).norm() + ui.rows(3, 3).norm();
        let m_i: f64 = (0..n).map(|c| vi[c].abs() * rho[c]).sum::<f64>() / sigma;
        let gamma = if m_i > 0.0 {
            (n_i / m_i).min(1.0) * gamma_max
        } else {
            gamma_max
        };
        let mut phi = vi * (alpha / sigma);
        clamp_max_abs(&mut phi, gamma);
        total += phi;
    }
    clamp_max_abs(&mut total, gamma_max);
    total
}

fn dls_step(j: &Matrix6xX<f64>, e: &Vector6<f64>, lambda: f64, gamma_max: f64) -> DVector<f64> {
    let jjt = j * j.transpose() + nalgebra::Matrix6::identity() * (lambda * lambda);
    let y = jjt.cholesky().map(|c| c.solve(e)).unwrap_or_else(Vector6::zeros);
    let mut dq = DVector::from_column_slice((j.transpose() * y).as_slice());
    clamp_max_abs(&mut dq, gamma_max);
    dq
}

/// Iterative pose IK from `q_seed`. Joints are clamped to their limits after
/// every step. If the tolerance is not met within `max_iters`, the iterate
/// with the smallest pose error is returned with `converged = false`.
pub fn sdls_ik(
    chain: &KinematicChain,
    q_seed: &[f64],
    target: &EndEffectorTarget,
    s: &IkSettings,
) -> Result<IkResult> {
    s.validate()?;
    if !target.pose.is_finite() {
        return Err(Error::InvalidInput("non-finite IK target".into()));
    }
    let ee = end_effector(chain)?;
    let mut q = q_seed.to_vec();
    chain.clamp_to_limits(&mut q);
    let score = |pe: &PoseError| pe.e.norm();
    let mut best: Option<(f64, IkResult)> = None;
    for iter in 0..=s.max_iters {
        let (frame, j) = geometric_jacobian(chain, &q, ee)?;
        let pe = pose_error(&frame, &target.pose);
        let result = IkResult {
            q: q.clone(),
            converged: pe.pos < s.pos_tol_m && pe.rot < s.rot_tol_rad,
            position_error: pe.pos,
            rotation_error: pe.rot,
            iterations: iter,
        };
        if result.converged {
            return Ok(result);
        }
        let sc = score(&pe);
        if best.as_ref().is_none_or(|(b, _)| sc < *b) {
            best = Some((sc, result));
        }
        if iter == s.max_iters {
            break;
        }
        let dq = match s.method {
            IkMethod::Sdls => sdls_step(&j, &pe.e, s.gamma_max),
            IkMethod::Dls => dls_step(&j, &pe.e, s.damping, s.gamma_max),
        };
        for (qi, d) in q.iter_mut().zip(dq.iter()) {
            *qi += d;
        }
        chain.clamp_to_limits(&mut q);
    }
    let (_, mut result) = best.expect("at least one iterate");
    result.iterations = s.max_iters;
    Ok(result)
}

/// Arm end-effector pose for joint vector `q`.
pub fn end_effector_pose(chain: &KinematicChain, q: &[f64]) -> Result<Transform3> {
    let ee = end_effector(chain)?;
    Ok(chain.link_frames(q)?[ee])
}

/// Straight-line distance between two end-effector positions.
pub fn translation_delta(a: &Transform3, b: &Transform3) -> f64 {
    (a.translation - b.translation).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::arm_chain;
    use crate::se3::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Rotation3 {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if axis.norm() < 1e-6 {
            return Rotation3::identity();
        }
        Rotation3::exp(&(axis.normalize() * rng.random_range(0.0..max_angle)))
    }

    fn random_transform(rng: &mut impl Rng, reach: f64) -> Transform3 {
        let t = Vec3::new(
            rng.random_range(-reach..reach),
            rng.random_range(-reach..reach),
            rng.random_range(-reach..reach),
        );
        Transform3::new(random_rotation(rng, 3.1), t)
    }

    fn smoother() -> SmootherState {
        ControlConfig::default().smoother().unwrap()
    }

    #[test]
    fn clip_passes_small_moves() {
        let cur = Transform3::from_translation(Vec3::new(0.1, 0.2, 0.3));
        let prop = Transform3::new(Rotation3::about_z(0.2), Vec3::new(0.15, 0.2, 0.3));
        assert_eq!(clip_outlier(&cur, &prop, &smoother()), prop);
    }

    #[test]
    fn clip_shortens_large_jump() {
        let cur = Transform3::identity();
        let dir = Vec3::new(1.0, 2.0, -2.0).normalize();
        let prop = Transform3::from_translation(dir);
        let out = clip_outlier(&cur, &prop, &smoother());
        assert!((out.translation.norm() - 0.1).abs() < 1e-15);
        assert!((out.translation.normalize() - dir).norm() < 1e-12);
        let prop = Transform3::from_rotation(Rotation3::about_x(2.0));
        let out = clip_outlier(&cur, &prop, &smoother());
        assert!((out.rotation.angle_to(&Rotation3::about_x(0.5))) < 1e-12);
    }

    #[test]
    fn clip_fuzz_respects_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let state = smoother();
        let (max_p, max_r) = state.clip_thresholds();
        for _ in 0..10_000 {
            let cur = random_transform(&mut rng, 1.0);
            let prop = random_transform(&mut rng, 1.0);
            let out = clip_outlier(&cur, &prop, &state);
            assert!((out.translation - cur.translation).norm() <= max_p * (1.0 + 1e-12));
            assert!(out.rotation.angle_to(&cur.rotation) <= max_r + 1e-9);
        }
    }

    #[test]
    fn ema_first_call_and_one_step() {
        let mut s = smoother();
        let p0 = Transform3::new(Rotation3::about_y(0.3), Vec3::new(0.0, 0.0, 0.0));
        assert_eq!(ema_update(&mut s, &p0), p0);
        let p1 = Transform3::new(Rotation3::about_y(0.3), Vec3::new(1.0, 0.0, 0.0));
        let out = ema_update(&mut s, &p1);
        assert!((out.translation.x - 0.25).abs() < 1e-15);
        assert_eq!(s.p_ema, Some(out));
    }

    #[test]
    fn ema_step_response_is_geometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let mut s = smoother();
            let p0 = random_transform(&mut rng, 1.0);
            let p1 = Transform3::new(
                random_rotation(&mut rng, 3.0) * p0.rotation,
                p0.translation + Vec3::new(0.3, -0.2, 0.5),
            );
            let d0 = (p1.translation - p0.translation).norm();
            let a0 = p0.rotation.angle_to(&p1.rotation);
            ema_update(&mut s, &p0);
            for n in 1..=40 {
                let out = ema_update(&mut s, &p1);
                let k = (1.0 - s.alpha()).powi(n);
                assert!(((out.translation - p1.translation).norm() - k * d0).abs() < 1e-9);
                assert!((out.rotation.angle_to(&p1.rotation) - k * a0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ema_rotation_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..200 {
            let mut s = SmootherState::new(rng.random_range(0.01..1.0), 0.1, 0.5).unwrap();
            let r = random_rotation(&mut rng, 3.1);
            ema_update(&mut s, &Transform3::identity());
            let out = ema_update(&mut s, &Transform3::from_rotation(r));
            assert!((out.rotation.angle() - s.alpha() * r.angle()).abs() < 1e-9);
        }
    }

    #[test]
    fn smoother_rejects_bad_alpha() {
        assert!(SmootherState::new(0.0, 0.1, 0.5).is_err());
        assert!(SmootherState::new(1.5, 0.1, 0.5).is_err());
        assert!(SmootherState::new(1.0, 0.1, 0.5).is_ok());
    }

    #[test]
    fn waypoint_examples() {
        let step = MaxStep {
            position: 0.03,
            rotation: 0.1,
        };
        let a = Transform3::from_translation(Vec3::new(0.2, 0.1, 0.0));
        assert_eq!(interpolate_waypoints(&a, &a, step).unwrap(), vec![a]);
        let b = Transform3::from_translation(Vec3::new(0.3, 0.1, 0.0));
        let w = interpolate_waypoints(&a, &b, step).unwrap();
        assert_eq!(w.len(), 4);
        let mut prev = a;
        for p in &w {
            assert!(((p.translation - prev.translation).norm() - 0.025).abs() < 1e-12);
            prev = *p;
        }
        assert_eq!(*w.last().unwrap(), b);
        assert!(interpolate_waypoints(
            &a,
            &b,
            MaxStep {
                position: 0.0,
                rotation: 0.1
            }
        )
        .is_err());
    }

    #[test]
    fn waypoint_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for _ in 0..10_000 {
            let a = random_transform(&mut rng, 0.5);
            let b = random_transform(&mut rng, 0.5);
            let step = MaxStep {
                position: rng.random_range(0.005..0.2),
                rotation: rng.random_range(0.01..0.5),
            };
            let w = interpolate_waypoints(&a, &b, step).unwrap();
            assert_eq!(*w.last().unwrap(), b);
            let mut prev = a;
            for p in &w {
                assert!((p.translation - prev.translation).norm() <= step.position * (1.0 + 1e-9));
                assert!(p.rotation.angle_to(&prev.rotation) <= step.rotation * (1.0 + 1e-9));
                prev = *p;
            }
            if w.len() > 1 {
                let n = (w.len() - 1) as f64;
                let d = (b.translation - a.translation).norm();
                let r = a.rotation.angle_to(&b.rotation);
                assert!(d / n > step.position || r / n > step.rotation, "not minimal");
            }
        }
    }

    #[test]
    fn hand_stream_examples() {
        let cur = vec![0.1; 16];
        assert_eq!(stream_hand_command(&cur, &cur, 0.1).unwrap(), vec![cur.clone()]);
        let mut target = cur.clone();
        target[5] += 0.3;
        let frames = stream_hand_command(&cur, &target, 0.1).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[2], target);
        assert!(stream_hand_command(&cur, &target, 0.0).is_err());
        assert!(stream_hand_command(&cur, &target[..15], 0.1).is_err());
    }

    #[test]
    fn hand_stream_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for _ in 0..2000 {
            let cur: Vec<f64> = (0..16).map(|_| rng.random_range(-0.5..1.7)).collect();
            let target: Vec<f64> = (0..16).map(|_| rng.random_range(-0.5..1.7)).collect();
            let step = rng.random_range(0.01..0.5);
            let frames = stream_hand_command(&cur, &target, step).unwrap();
            assert_eq!(frames.last().unwrap(), &target);
            let mut prev = &cur;
            for f in &frames {
                for (a, b) in prev.iter().zip(f) {
                    assert!((a - b).abs() <= step * (1.0 + 1e-9));
                }
                prev = f;
            }
        }
    }

    fn random_q(rng: &mut impl Rng, chain: &KinematicChain) -> Vec<f64> {
        chain
            .joints()
            .iter()
            .map(|j| rng.random_range(j.lower..j.upper))
            .collect()
    }

    #[test]
    fn ik_fixed_point() {
        let arm = arm_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let q = random_q(&mut rng, &arm);
        let pose = end_effector_pose(&arm, &q).unwrap();
        let r = sdls_ik(
            &arm,
            &q,
            &EndEffectorTarget { pose, timestamp: 0.0 },
            &IkSettings::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.q, q);
    }

    #[test]
    fn ik_reaches_fk_targets_from_nearby_seed() {
        let arm = arm_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for method in [IkMethod::Sdls, IkMethod::Dls] {
            let s = IkSettings {
                method,
                ..Default::default()
            };
            let mut converged = 0;
            for _ in 0..50 {
                let q = random_q(&mut rng, &arm);
                let mut seed: Vec<f64> = q.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
                arm.clamp_to_limits(&mut seed);
                let pose = end_effector_pose(&arm, &q).unwrap();
                let r = sdls_ik(&arm, &seed, &EndEffectorTarget { pose, timestamp: 0.0 }, &s).unwrap();
                assert!(arm.within_limits(&r.q));
                converged += r.converged as usize;
            }
            assert!(converged >= 45, "{method:?}: {converged}/50");
        }
    }

    #[test]
    fn ik_unreachable_returns_best_effort() {
        let arm = arm_chain();
        let pose = Transform3::from_translation(Vec3::new(1.6, 0.3, 0.4));
        let r = sdls_ik(
            &arm,
            &[0.0; 6],
            &EndEffectorTarget { pose, timestamp: 0.0 },
            &IkSettings::default(),
        )
        .unwrap();
        assert!(!r.converged);
        assert!(arm.within_limits(&r.q));
        let achieved = end_effector_pose(&arm, &r.q).unwrap();
        assert!((translation_delta(&achieved, &pose) - r.position_error).abs() < 1e-12);
        // The closest reachable point lies about one arm length from the base.
        assert!(r.position_error < 1.65 - 0.5);
    }

    #[test]
    fn ik_never_leaves_limits() {
        let arm = arm_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let s = IkSettings {
            max_iters: 30,
            ..Default::default()
        };
        for _ in 0..100 {
            let seed: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let pose = random_transform(&mut rng, 1.0);
            let r = sdls_ik(&arm, &seed, &EndEffectorTarget { pose, timestamp: 0.0 }, &s).unwrap();
            assert!(arm.within_limits(&r.q));
        }
    }

    #[test]
    fn config_validation() {
        assert!(ControlConfig::default().validate().is_ok());
        let bad = ControlConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = IkSettings {
            max_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let parsed: ControlConfig = toml::from_str("alpha = 0.5\n[ik]\nmax_iters = 10\n").unwrap();
        assert_eq!(parsed.alpha, 0.5);
        assert_eq!(parsed.ik.max_iters, 10);
        assert!(toml::from_str::<ControlConfig>("alpah = 0.5").is_err());
    }
}
