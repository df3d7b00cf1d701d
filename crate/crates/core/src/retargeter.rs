//! Hand retargeters: budgeted online gradient descent, the multi-restart
//! oracle, and the learned network with its training loop.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::CollisionClassifier;
use crate::energy::{energy, energy_and_gradient, residuals, EnergyConfig, KeyVectorSet};
use crate::error::{Error, Result};
use crate::human_model::{HandSkeletonModel, HumanHandPose, HAND_POSE_DIMS, SHAPE_DIMS};
use crate::kinematics::KinematicChain;
use crate::network::{Activation, Adam, AdamConfig, Mlp, NetworkKind, WeightFile};

/// Update rule of the online solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GdRule {
    /// Plain stochastic-gradient step `q -= lr * grad`.
    Plain,
    /// Adam moment estimates, reset every frame. Step size is in radians, so
    /// it converges far faster than `Plain` on the square-meter energy.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdSettings {
    pub learning_rate: f64,
    pub steps: usize,
    pub rule: GdRule,
    /// Wall-clock cap per frame in milliseconds; `None` runs all steps.
    pub time_budget_ms: Option<f64>,
}

impl Default for GdSettings {
    fn default() -> Self {
        GdSettings {
            learning_rate: 0.05,
            steps: 100,
            rule: GdRule::Plain,
            time_budget_ms: Some(40.0),
        }
    }
}

/// Online solver state. The seed carries over between frames.
#[derive(Clone, Debug)]
pub struct GdSolverState {
    pub seed: Vec<f64>,
    pub settings: GdSettings,
}

impl GdSolverState {
    /// First-frame seed is the all-zero vector.
    pub fn new(dof: usize, settings: GdSettings) -> Self {
        GdSolverState {
            seed: vec![0.0; dof],
            settings,
        }
    }

    pub fn with_seed(seed: Vec<f64>, settings: GdSettings) -> Self {
        GdSolverState { seed, settings }
    }
}

fn clamp(chain: &KinematicChain, q: &mut [f64]) {
    chain.clamp_to_limits(q);
}

/// Runs the configured gradient steps from the seed, clamping to the joint
/// limits after each step, then stores the result as the next seed.
pub fn retarget_gd(
    state: &mut GdSolverState,
    human_kv: &KeyVectorSet,
    chain: &KinematicChain,
    cfg: &EnergyConfig,
) -> Result<Vec<f64>> {
    if state.seed.len() != chain.dof() || !state.seed.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(
            "solver seed must be finite with one entry per joint".into(),
        ));
    }
    let s = &state.settings;
    let started = Instant::now();
    let budget = s.time_budget_ms.map(|ms| Duration::from_secs_f64(ms / 1000.0));
    let mut q = state.seed.clone();
    let n = q.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for step in 0..s.steps {
        if budget.is_some_and(|b| started.elapsed() >= b) {
            break;
        }
        let (_, g) = energy_and_gradient(human_kv, chain, &q, cfg)?;
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::Solver(format!(
                "non-finite gradient at step {step}, q = {q:?}"
            )));
        }
        let lr = s.learning_rate;
        match s.rule {
            GdRule::Plain => {
                for (qi, gi) in q.iter_mut().zip(g.iter()) {
                    *qi -= lr * gi;
                }
            }
            GdRule::Adam => {
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for i in 0..n {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    q[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
        clamp(chain, &mut q);
    }
    state.seed = q.clone();
    Ok(q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    /// Restarts including the all-zero start.
    pub restarts: usize,
    pub seed: u64,
    pub convergence_tol: f64,
    /// Safety cap on iterations per restart.
    pub max_iters: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            restarts: 8,
            seed: 2022,
            convergence_tol: 1e-10,
            max_iters: 5000,
        }
    }
}

/// One projected Levenberg-Marquardt descent run from `q0`.
/// Stops when the projected gradient norm drops below `tol` or the energy
/// improves by less than 1e-12 over 100 iterations.
fn descend(
    human_kv: &KeyVectorSet,
    chain: &KinematicChain,
    cfg: &EnergyConfig,
    mut q: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, f64)> {
    let lower = chain.lower_limits();
    let upper = chain.upper_limits();
    let n = q.len();
    clamp(chain, &mut q);
    let (mut r, j) = residuals(human_kv, chain, &q, cfg, true)?;
    let mut j = j.unwrap();
    let mut e = r.norm_squared();
    let mut mu = 1e-4;
    let mut history = std::collections::VecDeque::from([e]);
    for _ in 0..max_iters {
        let g = 2.0 * j.tr_mul(&r);
        // Joints pinned at a bound with the gradient pushing outward are frozen.
        let free: Vec<bool> = (0..n)
            .map(|i| !((q[i] <= lower[i] && g[i] > 0.0) || (q[i] >= upper[i] && g[i] < 0.0)))
            .collect();
        let pg = DVector::from_fn(n, |i, _| if free[i] { g[i] } else { 0.0 });
        if pg.norm() < tol {
            break;
        }
        let mut jtj = j.tr_mul(&j);
        let mut jtr = j.tr_mul(&r);
        for i in 0..n {
            if !free[i] {
                jtj.row_mut(i).fill(0.0);
                jtj.column_mut(i).fill(0.0);
                jtj[(i, i)] = 1.0;
                jtr[i] = 0.0;
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                mu *= 10.0;
                continue;
            };
            let mut cand: Vec<f64> = q.iter().zip(step.iter()).map(|(qi, si)| qi - si).collect();
            clamp(chain, &mut cand);
            let (rc, _) = residuals(human_kv, chain, &cand, cfg, false)?;
            let ec = rc.norm_squared();
            if ec < e {
                q = cand;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
        let (rn, jn) = residuals(human_kv, chain, &q, cfg, true)?;
        r = rn;
        j = jn.unwrap();
        e = r.norm_squared();
        history.push_back(e);
        if history.len() > 100 {
            let old = history.pop_front().unwrap();
            if old - e < 1e-12 {
                break;
            }
        }
    }
    Ok((q, e))
}

/// Best-of-restarts minimizer used as pseudo ground truth. Restart 0 starts
/// from zero; the rest start uniformly within the joint limits.
pub fn oracle_solve(
    human_kv: &KeyVectorSet,
    chain: &KinematicChain,
    cfg: &EnergyConfig,
    settings: &OracleSettings,
) -> Result<Vec<f64>> {
    Ok(oracle_solve_from(human_kv, chain, cfg, settings, &[])?.0)
}

/// Like `oracle_solve`, with extra starting points tried before the random
/// restarts. Returns the solution and its energy.
///
/// After the restarts, joint groups that drive the same keypoints (one group
/// per finger on the bundled hand) are spliced from every restart result into
/// the incumbent and re-descended, so a finger stuck in a poor basin in the
/// best run can borrow a better basin found by another run or by a fresh
/// random draw.
pub fn oracle_solve_from(
    human_kv: &KeyVectorSet,
    chain: &KinematicChain,
    cfg: &EnergyConfig,
    settings: &OracleSettings,
    extra_starts: &[Vec<f64>],
) -> Result<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; chain.dof()]];
    for _ in 1..settings.restarts.max(1) {
        starts.push(
            chain
                .joints()
                .iter()
                .map(|j| rng.random_range(j.lower..=j.upper))
                .collect(),
        );
    }
    starts.extend(extra_starts.iter().cloned());
    let mut results = Vec::with_capacity(starts.len());
    for s in starts {
        results.push(descend(
            human_kv,
            chain,
            cfg,
            s,
            settings.convergence_tol,
            settings.max_iters,
        )?);
    }
    let mut best = results
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("at least one restart");
    let groups = joint_groups(chain);
    if groups.len() > 1 {
        // Donors: every restart result plus fresh uniform draws.
        let mut donors: Vec<Vec<f64>> = results.iter().map(|(q, _)| q.clone()).collect();
        for _ in 0..settings.restarts {
            donors.push(
                chain
                    .joints()
                    .iter()
                    .map(|j| rng.random_range(j.lower..=j.upper))
                    .collect(),
            );
        }
        loop {
            let mut improved = false;
            for group in &groups {
                for other in &donors {
                    if group.iter().all(|&j| other[j] == best.0[j]) {
                        continue;
                    }
                    let mut start = best.0.clone();
                    for &j in group {
                        start[j] = other[j];
                    }
                    let cand = descend(
                        human_kv,
                        chain,
                        cfg,
                        start,
                        settings.convergence_tol,
                        settings.max_iters,
                    )?;
                    if cand.1 < best.1 - 1e-15 {
                        best = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    Ok(best)
}

/// Joints partitioned by the set of keypoints they move.
fn joint_groups(chain: &KinematicChain) -> Vec<Vec<usize>> {
    let mut groups: Vec<(Vec<bool>, Vec<usize>)> = Vec::new();
    for j in 0..chain.dof() {
        let sig: Vec<bool> = chain
            .keypoints()
            .iter()
            .map(|(_, l)| chain.joint_moves_link(j, *l))
            .collect();
        match groups.iter_mut().find(|(s, _)| *s == sig) {
            Some((_, g)) => g.push(j),
            None => groups.push((sig, vec![j])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Maps a raw network output to a joint angle: squash with tanh, then
/// rescale `[-1, 1]` affinely onto `[lower, upper]`.
pub fn squash_to_range(raw: f64, lower: f64, upper: f64) -> f64 {
    scale_to_range(raw.tanh(), lower, upper)
}

pub fn scale_to_range(squashed: f64, lower: f64, upper: f64) -> f64 {
    lower + (squashed + 1.0) * 0.5 * (upper - lower)
}

pub const NETWORK_INPUT_DIMS: usize = SHAPE_DIMS + HAND_POSE_DIMS;

/// Learned retargeter: MLP whose tanh outputs are rescaled to joint ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct RetargeterNetwork {
    net: Mlp,
    limits: Vec<(f64, f64)>,
}

impl RetargeterNetwork {
    pub fn new(net: Mlp, limits: Vec<(f64, f64)>) -> Result<Self> {
        if net.input_dim() != NETWORK_INPUT_DIMS || net.output_dim() != limits.len() {
            return Err(Error::InvalidInput(format!(
                "retargeter expects {NETWORK_INPUT_DIMS} inputs and {} outputs, got {:?}",
                limits.len(),
                net.sizes()
            )));
        }
        if net.layers().last().unwrap().activation != Activation::Tanh {
            return Err(Error::InvalidInput("retargeter output layer must be tanh".into()));
        }
        Ok(RetargeterNetwork { net, limits })
    }

    /// Fresh network with the given hidden sizes and joint limits.
    pub fn init(hidden: &[usize], chain: &KinematicChain, seed: u64) -> Result<Self> {
        let mut sizes = vec![NETWORK_INPUT_DIMS];
        sizes.extend(hidden);
        sizes.push(chain.dof());
        let net = Mlp::new(&sizes, Activation::Tanh, Activation::Tanh, seed)?;
        RetargeterNetwork::new(net, chain.joints().iter().map(|j| (j.lower, j.upper)).collect())
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn limits(&self) -> &[(f64, f64)] {
        &self.limits
    }

    fn scale(&self, squashed: &[f64]) -> Vec<f64> {
        squashed
            .iter()
            .zip(&self.limits)
            .map(|(s, (lo, hi))| scale_to_range(*s, *lo, *hi).clamp(*lo, *hi))
            .collect()
    }

    pub fn forward_input(&self, x: &[f64]) -> Vec<f64> {
        self.scale(self.net.forward(x).as_slice())
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            kind: NetworkKind::Retargeter,
            net: self.net.clone(),
            scaling: self.limits.clone(),
        }
    }

    pub fn from_weight_file(file: WeightFile) -> Result<Self> {
        if file.kind != NetworkKind::Retargeter {
            return Err(Error::InvalidInput(
                "weight file does not hold a retargeter".into(),
            ));
        }
        RetargeterNetwork::new(file.net, file.scaling)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::network::save_weights(&self.to_weight_file(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RetargeterNetwork::from_weight_file(crate::network::load_weights(path)?)
    }
}

/// Network retargeting of one pose from `concat(beta, theta)`.
pub fn retarget_nn(net: &RetargeterNetwork, pose: &HumanHandPose) -> Vec<f64> {
    net.forward_input(&pose.network_input())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetargeterTraining {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Collision-loss weight in [0, 1].
    pub lambda: f64,
    pub seed: u64,
}

impl Default for RetargeterTraining {
    fn default() -> Self {
        RetargeterTraining {
            hidden: vec![256, 256, 128],
            epochs: 50,
            batch_size: 256,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            lambda: 0.0,
            seed: 1,
        }
    }
}

/// A training run: inputs, settings and the frozen classifier (required when
/// `lambda > 0`).
pub struct TrainingRun<'a> {
    pub poses: &'a [HumanHandPose],
    pub settings: RetargeterTraining,
    pub classifier: Option<&'a CollisionClassifier>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_energy: f64,
    pub mean_collision_score: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Collision-term normalization, fixed from the first epoch.
    pub k: f64,
}

impl TrainingLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.epochs {
            let line = serde_json::to_string(r).expect("epoch record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Precomputed training inputs: network inputs and human keyvectors.
pub struct PreparedPoses {
    pub inputs: Vec<Vec<f64>>,
    pub keyvectors: Vec<KeyVectorSet>,
}

pub fn prepare_poses(
    model: &HandSkeletonModel,
    poses: &[HumanHandPose],
    cfg: &EnergyConfig,
) -> Result<PreparedPoses> {
    let mut inputs = Vec::with_capacity(poses.len());
    let mut keyvectors = Vec::with_capacity(poses.len());
    for p in poses {
        keyvectors.push(crate::energy::human_keyvectors(model, p, cfg)?);
        inputs.push(p.network_input());
    }
    Ok(PreparedPoses { inputs, keyvectors })
}

/// Minimizes the batch mean of `E(x, f(x)) + lambda * K * score(f(x))`.
/// Gradients flow through forward kinematics and the frozen classifier into
/// the network weights only. `K` is the ratio of mean energy to mean
/// collision score measured over the first epoch and then held fixed.
pub fn train_retargeter(
    run: &TrainingRun,
    model: &HandSkeletonModel,
    chain: &KinematicChain,
    cfg: &EnergyConfig,
) -> Result<(RetargeterNetwork, TrainingLog)> {
    let prepared = prepare_poses(model, run.poses, cfg)?;
    train_retargeter_prepared(&prepared, &run.settings, run.classifier, chain, cfg)
}

pub fn train_retargeter_prepared(
    data: &PreparedPoses,
    hp: &RetargeterTraining,
    classifier: Option<&CollisionClassifier>,
    chain: &KinematicChain,
    cfg: &EnergyConfig,
) -> Result<(RetargeterNetwork, TrainingLog)> {
    if data.inputs.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if !(0.0..=1.0).contains(&hp.lambda) {
        return Err(Error::Training(format!("lambda {} outside [0, 1]", hp.lambda)));
    }
    if hp.lambda > 0.0 && classifier.is_none() {
        return Err(Error::Training(
            "lambda > 0 requires a collision classifier".into(),
        ));
    }
    if hp.batch_size == 0 {
        return Err(Error::Training("batch size must be positive".into()));
    }
    let started = Instant::now();
    let mut net = RetargeterNetwork::init(&hp.hidden, chain, hp.seed)?;
    let mut opt = Adam::new(&net.net, hp.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.inputs.len()).collect();
    let dof = chain.dof();
    let half_range: Vec<f64> = net.limits.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect();
    let mut k: Option<f64> = None;
    let mut epochs = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let (mut sum_e, mut sum_s) = (0.0, 0.0);
        // Until K is known the first epoch trains on energy alone.
        let k_now = k.unwrap_or(0.0);
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let bs = chunk.len();
            let mut x = DMatrix::zeros(NETWORK_INPUT_DIMS, bs);
            for (c, &i) in chunk.iter().enumerate() {
                x.column_mut(c).copy_from_slice(&data.inputs[i]);
            }
            let acts = net.net.forward_cached(&x);
            let out = acts.last().unwrap();
            let mut q = DMatrix::zeros(dof, bs);
            for c in 0..bs {
                for j in 0..dof {
                    let (lo, hi) = net.limits[j];
                    q[(j, c)] = scale_to_range(out[(j, c)], lo, hi);
                }
            }
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "non-finite network output".into(),
                });
            }
            // dL/dq per sample, averaged over the batch
            let mut dq = DMatrix::zeros(dof, bs);
            let mut batch_e = 0.0;
            for (c, &i) in chunk.iter().enumerate() {
                let qc: Vec<f64> = q.column(c).iter().copied().collect();
                let (e, g) = energy_and_gradient(&data.keyvectors[i], chain, &qc, cfg)?;
                batch_e += e;
                dq.column_mut(c).copy_from(&(g / bs as f64));
            }
            let mut batch_s = 0.0;
            if let Some(clf) = classifier {
                let (scores, ds) = clf.score_and_gradient_batch(&q);
                batch_s = scores.iter().sum();
                if hp.lambda > 0.0 && k_now > 0.0 {
                    dq += ds * (hp.lambda * k_now / bs as f64);
                }
            }
            let loss = (batch_e + hp.lambda * k_now * batch_s) / bs as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("mean energy {}", batch_e / bs as f64),
                });
            }
            sum_e += batch_e;
            sum_s += batch_s;
            // through the affine rescale: dq/dtanh = half range
            for c in 0..bs {
                for j in 0..dof {
                    dq[(j, c)] *= half_range[j];
                }
            }
            let (grad, _) = net.net.backward(&acts, &dq);
            if !grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "non-finite weight gradient".into(),
                });
            }
            opt.step(&mut net.net, &grad);
        }
        let n = data.inputs.len() as f64;
        let record = EpochRecord {
            epoch,
            mean_energy: sum_e / n,
            mean_collision_score: if classifier.is_some() { sum_s / n } else { 0.0 },
            wall_time: started.elapsed().as_secs_f64(),
        };
        if k.is_none() {
            k = Some(if classifier.is_some() && sum_s > 0.0 {
                sum_e / sum_s
            } else {
                0.0
            });
            log::info!("collision loss normalization K = {:.6e}", k.unwrap());
        }
        log::debug!(
            "epoch {epoch}: energy {:.4e} collision {:.4}",
            record.mean_energy,
            record.mean_collision_score
        );
        epochs.push(record);
    }
    Ok((
        net,
        TrainingLog {
            epochs,
            k: k.unwrap_or(0.0),
        },
    ))
}

/// Mean energy of a retargeted set, used by evaluation and tests.
pub fn mean_energy(
    kvs: &[KeyVectorSet],
    qs: &[Vec<f64>],
    chain: &KinematicChain,
    cfg: &EnergyConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (kv, q) in kvs.iter().zip(qs) {
        total += energy(kv, chain, q, cfg)?;
    }
    Ok(total / kvs.len().max(1) as f64)
}
