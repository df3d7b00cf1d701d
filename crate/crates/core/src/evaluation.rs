//! Desk-scale analyses: RMSE to the oracle, the collision-weight sweep and
//! stage timing.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::collision::{check_self_collision, CollisionClassifier, CollisionGeometry};
use crate::energy::{energy, human_keyvectors, EnergyConfig, KeyVectorSet};
use crate::error::{Error, Result};
use crate::human_model::{HandPoseSampler, HandSkeletonModel, HumanHandPose, SamplerConfig};
use crate::kinematics::KinematicChain;
use crate::pipeline::{percentile, run_pipeline, ExecutionMode, PipelineContext, PoseRecord};
use crate::retargeter::{
    oracle_solve, retarget_gd, retarget_nn, train_retargeter_prepared, GdSettings, GdSolverState,
    OracleSettings, PreparedPoses, RetargeterNetwork, RetargeterTraining,
};

/// Seed of the standard held-out evaluation set.
pub const STANDARD_EVAL_SEED: u64 = 2022;
pub const STANDARD_EVAL_POSES: usize = 500;
pub const STANDARD_SWEEP_POSES: usize = 3000;
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Held-out sets and the sweep grid. Sweep networks are trained with the
/// regular retargeter data and training settings, so a single training run
/// at one lambda reproduces the matching sweep row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub eval_poses: usize,
    pub eval_seed: u64,
    pub sweep_poses: usize,
    pub sweep_seed: u64,
    pub lambdas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_poses: STANDARD_EVAL_POSES,
            eval_seed: STANDARD_EVAL_SEED,
            sweep_poses: STANDARD_SWEEP_POSES,
            sweep_seed: 2023,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

/// `n` draws of the pose sampler with `seed`.
pub fn sample_dataset(
    model: &HandSkeletonModel,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Vec<HumanHandPose> {
    HandPoseSampler::new(model, cfg.clone(), seed).sample_n(n)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    /// Mean over poses of the per-pose joint RMSE to the oracle (radians).
    pub rmse_rad: f64,
    pub mean_energy: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub poses: usize,
    pub seed: u64,
    pub oracle: OracleSettings,
    pub gd: GdSettings,
    pub methods: Vec<MethodRow>,
    pub tool_version: String,
    /// Config hash, model checksums and the like, filled in by callers that
    /// know the files involved.
    pub provenance: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodRow> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn row(method: &str, qs: &[Vec<f64>], oracle: &[Vec<f64>], energies: &[f64], times_ms: &[f64]) -> MethodRow {
    let n = qs.len().max(1) as f64;
    MethodRow {
        method: method.to_string(),
        rmse_rad: qs.iter().zip(oracle).map(|(q, o)| rmse(q, o)).sum::<f64>() / n,
        mean_energy: energies.iter().sum::<f64>() / n,
        mean_ms: times_ms.iter().sum::<f64>() / n,
        median_ms: percentile(times_ms, 50.0),
    }
}

pub struct EvalInputs<'a> {
    pub poses: &'a [HumanHandPose],
    pub dataset: String,
    pub seed: u64,
    pub model: &'a HandSkeletonModel,
    pub chain: &'a KinematicChain,
    pub energy: &'a EnergyConfig,
}

/// Runs the oracle, the network and budget-limited GD on every pose. The GD
/// solver keeps its seed from one pose to the next, as it would on a stream.
pub fn eval_oracle_rmse(
    inputs: &EvalInputs,
    net: &RetargeterNetwork,
    gd: &GdSettings,
    oracle: &OracleSettings,
) -> Result<EvalReport> {
    let EvalInputs {
        poses,
        model,
        chain,
        energy: cfg,
        ..
    } = *inputs;
    let kvs: Vec<KeyVectorSet> = poses
        .iter()
        .map(|p| human_keyvectors(model, p, cfg))
        .collect::<Result<_>>()?;
    let mut oracle_q = Vec::with_capacity(poses.len());
    let (mut oracle_e, mut oracle_ms) = (Vec::new(), Vec::new());
    for kv in &kvs {
        let t = Instant::now();
        let q = oracle_solve(kv, chain, cfg, oracle)?;
        oracle_ms.push(t.elapsed().as_secs_f64() * 1e3);
        oracle_e.push(energy(kv, chain, &q, cfg)?);
        oracle_q.push(q);
    }
    let (mut nn_q, mut nn_e, mut nn_ms) = (Vec::new(), Vec::new(), Vec::new());
    for (p, kv) in poses.iter().zip(&kvs) {
        let t = Instant::now();
        let q = retarget_nn(net, p);
        nn_ms.push(t.elapsed().as_secs_f64() * 1e3);
        nn_e.push(energy(kv, chain, &q, cfg)?);
        nn_q.push(q);
    }
    let mut state = GdSolverState::new(chain.dof(), gd.clone());
    let (mut gd_q, mut gd_e, mut gd_ms) = (Vec::new(), Vec::new(), Vec::new());
    for kv in &kvs {
        let t = Instant::now();
        let q = retarget_gd(&mut state, kv, chain, cfg)?;
        gd_ms.push(t.elapsed().as_secs_f64() * 1e3);
        gd_e.push(energy(kv, chain, &q, cfg)?);
        gd_q.push(q);
    }
    Ok(EvalReport {
        dataset: inputs.dataset.clone(),
        poses: poses.len(),
        seed: inputs.seed,
        oracle: oracle.clone(),
        gd: gd.clone(),
        methods: vec![
            row("oracle", &oracle_q, &oracle_q, &oracle_e, &oracle_ms),
            row("nn", &nn_q, &oracle_q, &nn_e, &nn_ms),
            row("gd", &gd_q, &oracle_q, &gd_e, &gd_ms),
        ],
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        provenance: BTreeMap::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub lambda: f64,
    pub collision_fraction: f64,
    pub mean_energy: f64,
    /// Collision normalization used during training.
    pub k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffCurve {
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,collision_fraction,mean_energy,k\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.lambda, r.collision_fraction, r.mean_energy, r.k
            ));
        }
        s
    }

    pub fn spearman_collision(&self) -> f64 {
        let l: Vec<f64> = self.rows.iter().map(|r| r.lambda).collect();
        spearman(
            &l,
            &self.rows.iter().map(|r| r.collision_fraction).collect::<Vec<_>>(),
        )
    }

    pub fn spearman_energy(&self) -> f64 {
        let l: Vec<f64> = self.rows.iter().map(|r| r.lambda).collect();
        spearman(&l, &self.rows.iter().map(|r| r.mean_energy).collect::<Vec<_>>())
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of the ranks. NaN when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub struct SweepInputs<'a> {
    pub train: &'a PreparedPoses,
    /// Held-out network inputs and keyvectors.
    pub heldout: &'a PreparedPoses,
    pub classifier: &'a CollisionClassifier,
    pub geometry: &'a CollisionGeometry,
    pub chain: &'a KinematicChain,
    pub energy: &'a EnergyConfig,
}

/// Collision fraction and mean energy of `net` on held-out data.
pub fn evaluate_network(net: &RetargeterNetwork, inputs: &SweepInputs) -> Result<(f64, f64)> {
    let n = inputs.heldout.inputs.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty held-out set".into()));
    }
    let (mut colliding, mut e_sum) = (0usize, 0.0);
    for (x, kv) in inputs.heldout.inputs.iter().zip(&inputs.heldout.keyvectors) {
        let q = net.forward_input(x);
        if check_self_collision(inputs.geometry, inputs.chain, &q)? {
            colliding += 1;
        }
        e_sum += energy(kv, inputs.chain, &q, inputs.energy)?;
    }
    Ok((colliding as f64 / n as f64, e_sum / n as f64))
}

/// Trains one network per lambda with identical data and seed, and measures
/// each on the held-out set.
pub fn sweep_collision_weight(
    lambdas: &[f64],
    inputs: &SweepInputs,
    base: &RetargeterTraining,
) -> Result<TradeoffCurve> {
    sweep_collision_weight_with(lambdas, inputs, base, |_, _| Ok(()))
}

/// Like `sweep_collision_weight`, handing each trained network to `visit`.
pub fn sweep_collision_weight_with(
    lambdas: &[f64],
    inputs: &SweepInputs,
    base: &RetargeterTraining,
    mut visit: impl FnMut(&TradeoffRow, &RetargeterNetwork) -> Result<()>,
) -> Result<TradeoffCurve> {
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("lambdas must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let hp = RetargeterTraining {
            lambda,
            ..base.clone()
        };
        let (net, log) = train_retargeter_prepared(
            inputs.train,
            &hp,
            Some(inputs.classifier),
            inputs.chain,
            inputs.energy,
        )?;
        let (collision_fraction, mean_energy) = evaluate_network(&net, inputs)?;
        log::info!(
            "lambda {lambda}: collision fraction {collision_fraction:.4}, mean energy {mean_energy:.4e}"
        );
        let row = TradeoffRow {
            lambda,
            collision_fraction,
            mean_energy,
            k: log.k,
        };
        visit(&row, &net)?;
        rows.push(row);
    }
    Ok(TradeoffCurve { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRow {
    pub stage: String,
    pub messages: u64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub throughput_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetargeterTiming {
    pub nn_median_ms: f64,
    pub gd_median_ms: f64,
    /// `gd_median_ms / nn_median_ms`.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub stages: Vec<StageRow>,
    pub retargeters: Option<RetargeterTiming>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,messages,median_ms,p95_ms,throughput_hz\n");
        for r in &self.stages {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.stage, r.messages, r.median_ms, r.p95_ms, r.throughput_hz
            ));
        }
        s
    }
}

/// Runs the pipeline once to warm up, then `reps` more times in lockstep
/// mode, pooling per-stage latencies.
pub fn bench_stages(ctx: &PipelineContext, records: &[PoseRecord], reps: usize) -> Result<Vec<StageRow>> {
    if records.is_empty() || reps == 0 {
        return Ok(Vec::new());
    }
    let mut ctx = ctx.clone();
    ctx.pipeline.mode = ExecutionMode::Lockstep;
    run_pipeline(&ctx, records.to_vec())?;
    let mut pooled: Vec<(String, Vec<f64>, f64)> = Vec::new();
    for _ in 0..reps {
        let run = run_pipeline(&ctx, records.to_vec())?;
        if let Some(f) = run.failure {
            return Err(Error::Pipeline(f));
        }
        for node in run.telemetry.nodes {
            match pooled.iter_mut().find(|(n, _, _)| *n == node.name) {
                Some((_, lat, hz)) => {
                    lat.extend(node.latencies_ms);
                    *hz += node.throughput_hz / reps as f64;
                }
                None => pooled.push((node.name, node.latencies_ms, node.throughput_hz / reps as f64)),
            }
        }
    }
    Ok(pooled
        .into_iter()
        .map(|(stage, lat, hz)| StageRow {
            stage,
            messages: lat.len() as u64,
            median_ms: percentile(&lat, 50.0),
            p95_ms: percentile(&lat, 95.0),
            throughput_hz: hz,
        })
        .collect())
}

/// Median per-pose time of the network forward pass and of 100-step GD from
/// a fresh zero seed (including the human keyvectors GD needs), on the same
/// poses. Each is repeated `reps` times after one warm-up pass.
pub fn time_retargeters(
    poses: &[HumanHandPose],
    net: &RetargeterNetwork,
    model: &HandSkeletonModel,
    chain: &KinematicChain,
    cfg: &EnergyConfig,
    reps: usize,
) -> Result<RetargeterTiming> {
    if poses.is_empty() {
        return Err(Error::InvalidInput("no poses to time".into()));
    }
    let gd = GdSettings {
        steps: 100,
        time_budget_ms: None,
        ..Default::default()
    };
    let mut nn_ms = Vec::new();
    let mut gd_ms = Vec::new();
    for rep in 0..=reps {
        for p in poses {
            let t = Instant::now();
            std::hint::black_box(retarget_nn(net, std::hint::black_box(p)));
            let a = t.elapsed().as_secs_f64() * 1e3;
            let t = Instant::now();
            let kv = human_keyvectors(model, std::hint::black_box(p), cfg)?;
            let mut state = GdSolverState::new(chain.dof(), gd.clone());
            std::hint::black_box(retarget_gd(&mut state, &kv, chain, cfg)?);
            let b = t.elapsed().as_secs_f64() * 1e3;
            if rep > 0 {
                nn_ms.push(a);
                gd_ms.push(b);
            }
        }
    }
    let nn = percentile(&nn_ms, 50.0);
    let gd = percentile(&gd_ms, 50.0);
    Ok(RetargeterTiming {
        nn_median_ms: nn,
        gd_median_ms: gd,
        speedup: gd / nn,
    })
}
