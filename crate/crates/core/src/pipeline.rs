//! Pose and command streams, and the dataflow graph that turns the former
//! into the latter.
//!
//! Nodes are stages connected by single-producer, single-consumer channels.
//! A graph can run in three ways:
//!
//! * `Sequential`: one thread, each record pushed through every node before
//!   the next one is read.
//! * `Lockstep`: one thread per node, blocking channels, no drops. The output
//!   is a pure function of the input.
//! * `Realtime`: one thread per node, capacity-1 latest-wins channels, so a
//!   slow stage always works on the newest message and stale ones are dropped.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::body_retarget::{map_wrist_to_target, BodyRetargetConfig, EndEffectorTarget};
use crate::control::{
    clip_outlier, ema_update, end_effector_pose, interpolate_waypoints, sdls_ik, stream_hand_command,
    ControlConfig, SmootherState,
};
use crate::energy::{human_keyvectors, EnergyConfig};
use crate::error::{Error, Result};
use crate::human_model::{
    wrist_relative_to_torso, BodySkeletonModel, HandSkeletonModel, HumanBodyPose, HumanHandPose, BODY_JOINTS,
};
use crate::kinematics::KinematicChain;
use crate::retargeter::{retarget_gd, retarget_nn, GdSettings, GdSolverState, RetargeterNetwork};
use crate::se3::{Rotation3, Transform3};

// ---------------------------------------------------------------------------
// Wire formats

/// One recorded pose-estimator output.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    pub t: f64,
    pub hand: HumanHandPose,
    pub body: Option<HumanBodyPose>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HandDoc {
    beta: Vec<f64>,
    theta: Vec<f64>,
    phi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BodyDoc {
    beta: Vec<f64>,
    /// Row-major rotation matrices.
    theta: Vec<[f64; 9]>,
    phi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDoc {
    t: f64,
    hand: HandDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body: Option<BodyDoc>,
}

impl PoseRecord {
    fn from_doc(doc: PoseDoc) -> Result<Self> {
        if !doc.t.is_finite() {
            return Err(Error::InvalidInput("non-finite timestamp".into()));
        }
        let hand = HumanHandPose::new(doc.hand.beta, doc.hand.theta, doc.hand.phi)?;
        let body = match doc.body {
            None => None,
            Some(b) => {
                if b.theta.len() != BODY_JOINTS {
                    return Err(Error::InvalidInput(format!(
                        "body theta has {} rotations, expected {BODY_JOINTS}",
                        b.theta.len()
                    )));
                }
                let mut theta = Vec::with_capacity(b.theta.len());
                for (i, m) in b.theta.iter().enumerate() {
                    let m = Matrix3::from_row_slice(m);
                    Rotation3::from_matrix(m)
                        .map_err(|e| Error::InvalidInput(format!("body theta[{i}]: {e}")))?;
                    // Keep the stored entries so that writing reproduces the input.
                    theta.push(Rotation3::from_matrix_unchecked(m));
                }
                Some(HumanBodyPose::new(b.beta, theta, b.phi)?)
            }
        };
        Ok(PoseRecord { t: doc.t, hand, body })
    }

    fn to_doc(&self) -> PoseDoc {
        PoseDoc {
            t: self.t,
            hand: HandDoc {
                beta: self.hand.beta.clone(),
                theta: self.hand.theta.clone(),
                phi: self.hand.phi.clone(),
            },
            body: self.body.as_ref().map(|b| BodyDoc {
                beta: b.beta.clone(),
                theta: b
                    .theta
                    .iter()
                    .map(|r| {
                        let m = r.matrix();
                        [
                            m[(0, 0)],
                            m[(0, 1)],
                            m[(0, 2)],
                            m[(1, 0)],
                            m[(1, 1)],
                            m[(1, 2)],
                            m[(2, 0)],
                            m[(2, 1)],
                            m[(2, 2)],
                        ]
                    })
                    .collect(),
                phi: b.phi.clone(),
            }),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("pose record serializes")
    }
}

/// Lazy reader over a pose JSONL file. Blank lines are skipped.
pub struct PoseStream {
    lines: std::io::Lines<BufReader<File>>,
    source: String,
    line_no: usize,
    last_t: Option<f64>,
    failed: bool,
}

impl Iterator for PoseStream {
    type Item = Result<PoseRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(&self.source, e)));
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let at = format!("line {}", self.line_no);
            let rec = serde_json::from_str::<PoseDoc>(&line)
                .map_err(|e| Error::parse(&self.source, &at, e.to_string()))
                .and_then(|doc| {
                    PoseRecord::from_doc(doc).map_err(|e| Error::parse(&self.source, &at, e.to_string()))
                })
                .and_then(|rec| match self.last_t {
                    Some(prev) if rec.t <= prev => Err(Error::parse(
                        &self.source,
                        &at,
                        format!("timestamp {} does not increase (previous {prev})", rec.t),
                    )),
                    _ => Ok(rec),
                });
            match &rec {
                Ok(r) => self.last_t = Some(r.t),
                Err(_) => self.failed = true,
            }
            return Some(rec);
        }
    }
}

pub fn read_pose_stream(path: &Path) -> Result<PoseStream> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(PoseStream {
        lines: BufReader::new(file).lines(),
        source: path.display().to_string(),
        line_no: 0,
        last_t: None,
        failed: false,
    })
}

/// Reads and validates a whole pose file.
pub fn read_pose_records(path: &Path) -> Result<Vec<PoseRecord>> {
    read_pose_stream(path)?.collect()
}

pub fn write_pose_stream(records: &[PoseRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One command for the robot: arm and hand joint angles in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandFrame {
    pub t: f64,
    pub arm_q: Vec<f64>,
    pub hand_q: Vec<f64>,
    /// Sequence number of the pose record the frame derives from.
    pub src_seq: u64,
    pub ik_converged: bool,
}

pub fn write_command_stream(frames: &[CommandFrame], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for f in frames {
        let line = serde_json::to_string(f).expect("command frame serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a command file, checking that timestamps never decrease.
pub fn read_command_stream(path: &Path) -> Result<Vec<CommandFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let mut out: Vec<CommandFrame> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("line {}", i + 1);
        let frame: CommandFrame =
            serde_json::from_str(line).map_err(|e| Error::parse(&source, &at, e.to_string()))?;
        if let Some(prev) = out.last() {
            if frame.t < prev.t {
                return Err(Error::parse(
                    &source,
                    &at,
                    format!("timestamp {} decreases (previous {})", frame.t, prev.t),
                ));
            }
        }
        out.push(frame);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generic node graph

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Sequential,
    Lockstep,
    Realtime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overflow {
    /// The producer waits for space.
    Block,
    /// The oldest queued message is discarded to make room.
    LatestWins,
}

#[derive(Clone, Debug)]
pub struct ChannelSpec {
    pub name: String,
    pub capacity: usize,
    /// Used in realtime mode; lockstep and sequential runs never drop.
    pub overflow: Overflow,
}

pub type SourceFn<M> = Box<dyn FnMut() -> Result<Option<M>> + Send>;
/// Receives one message from each input, in input order.
pub type StageFn<M> = Box<dyn FnMut(Vec<M>) -> Result<M> + Send>;

pub enum NodeFn<M> {
    Source(SourceFn<M>),
    Stage(StageFn<M>),
}

pub struct Node<M> {
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub func: NodeFn<M>,
}

/// Nodes without outputs are sinks; whatever they return is collected as the
/// graph output.
pub struct NodeGraph<M> {
    nodes: Vec<Node<M>>,
    channels: Vec<ChannelSpec>,
}

impl<M> Default for NodeGraph<M> {
    fn default() -> Self {
        NodeGraph {
            nodes: Vec::new(),
            channels: Vec::new(),
        }
    }
}

impl<M: Send + Clone + 'static> NodeGraph<M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn channel(&mut self, name: &str, capacity: usize, overflow: Overflow) -> &mut Self {
        self.channels.push(ChannelSpec {
            name: name.to_string(),
            capacity: capacity.max(1),
            overflow,
        });
        self
    }

    pub fn source(&mut self, name: &str, outputs: &[&str], f: SourceFn<M>) -> &mut Self {
        self.nodes.push(Node {
            name: name.to_string(),
            inputs: Vec::new(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            func: NodeFn::Source(f),
        });
        self
    }

    pub fn stage(&mut self, name: &str, inputs: &[&str], outputs: &[&str], f: StageFn<M>) -> &mut Self {
        self.nodes.push(Node {
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            func: NodeFn::Stage(f),
        });
        self
    }

    pub fn node_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    /// Checks the wiring and returns a topological order of the nodes.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let err = |m: String| Error::Pipeline(format!("invalid graph: {m}"));
        let mut names = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if names.insert(n.name.as_str(), i).is_some() {
                return Err(err(format!("duplicate node '{}'", n.name)));
            }
            let is_source = matches!(n.func, NodeFn::Source(_));
            if is_source != n.inputs.is_empty() {
                return Err(err(format!(
                    "node '{}': sources have no inputs, stages need some",
                    n.name
                )));
            }
        }
        let mut producer: HashMap<&str, usize> = HashMap::new();
        let mut consumer: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for c in &n.outputs {
                if producer.insert(c, i).is_some() {
                    return Err(err(format!("channel '{c}' has more than one producer")));
                }
            }
            for c in &n.inputs {
                if consumer.insert(c, i).is_some() {
                    return Err(err(format!("channel '{c}' has more than one consumer")));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.channels {
            if !seen.insert(c.name.as_str()) {
                return Err(err(format!("duplicate channel '{}'", c.name)));
            }
            if !producer.contains_key(c.name.as_str()) || !consumer.contains_key(c.name.as_str()) {
                return Err(err(format!(
                    "channel '{}' needs exactly one producer and one consumer",
                    c.name
                )));
            }
        }
        for c in producer.keys().chain(consumer.keys()) {
            if !seen.contains(c) {
                return Err(err(format!("undeclared channel '{c}'")));
            }
        }
        // Kahn's algorithm.
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            indeg[i] = node.inputs.len();
        }
        let mut ready: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_front() {
            order.push(i);
            for c in &self.nodes[i].outputs {
                let j = consumer[c.as_str()];
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push_back(j);
                }
            }
        }
        if order.len() != n {
            return Err(err("graph has a cycle".into()));
        }
        Ok(order)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NodeTelemetry {
    pub name: String,
    pub processed: u64,
    pub mean_latency_ms: f64,
    /// Observed message rate between the first and the last processed message.
    pub throughput_hz: f64,
    /// Messages this node never saw because a newer one replaced them.
    pub drops: u64,
    #[serde(skip)]
    pub latencies_ms: Vec<f64>,
}

impl NodeTelemetry {
    /// Rate the node could sustain if never idle.
    pub fn capacity_hz(&self) -> f64 {
        if self.mean_latency_ms > 0.0 {
            1000.0 / self.mean_latency_ms
        } else {
            f64::INFINITY
        }
    }

    pub fn latency_percentile_ms(&self, p: f64) -> f64 {
        percentile(&self.latencies_ms, p)
    }
}

/// Nearest-rank percentile, `p` in [0, 100]. NaN for an empty slice.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageTelemetry {
    pub nodes: Vec<NodeTelemetry>,
    pub wall_time_s: f64,
    pub outputs: u64,
    /// Outputs per second over the whole run.
    pub end_to_end_hz: f64,
}

impl StageTelemetry {
    pub fn node(&self, name: &str) -> Option<&NodeTelemetry> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Smallest per-node capacity; the pipeline cannot run faster.
    pub fn slowest_stage_hz(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.capacity_hz())
            .fold(f64::INFINITY, f64::min)
    }
}

pub struct GraphRun<M> {
    pub outputs: Vec<M>,
    pub telemetry: StageTelemetry,
    /// First node failure, if any. Outputs and telemetry are partial then.
    pub failure: Option<String>,
}

#[derive(Default)]
struct Recorder {
    processed: u64,
    busy: Duration,
    first: Option<Instant>,
    last: Option<Instant>,
    latencies_ms: Vec<f64>,
}

impl Recorder {
    fn record(&mut self, started: Instant) {
        let now = Instant::now();
        let d = now - started;
        self.processed += 1;
        self.busy += d;
        self.latencies_ms.push(d.as_secs_f64() * 1e3);
        self.first.get_or_insert(started);
        self.last = Some(now);
    }

    fn finish(self, name: &str, drops: u64) -> NodeTelemetry {
        let throughput_hz = match (self.first, self.last) {
            (Some(a), Some(b)) if self.processed > 1 && b > a => {
                (self.processed - 1) as f64 / (b - a).as_secs_f64()
            }
            _ => 0.0,
        };
        NodeTelemetry {
            name: name.to_string(),
            processed: self.processed,
            mean_latency_ms: if self.processed > 0 {
                self.busy.as_secs_f64() * 1e3 / self.processed as f64
            } else {
                0.0
            },
            throughput_hz,
            drops,
            latencies_ms: self.latencies_ms,
        }
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Runs `graph` to completion. `timeout` bounds the whole run; nodes still
/// busy when it expires are abandoned and reported as a failure.
pub fn run_graph<M: Send + Clone + 'static>(
    graph: NodeGraph<M>,
    mode: ExecutionMode,
    timeout: Duration,
) -> Result<GraphRun<M>> {
    let order = graph.validate()?;
    match mode {
        ExecutionMode::Sequential => Ok(run_sequential(graph, &order)),
        ExecutionMode::Lockstep => Ok(run_threaded(graph, false, timeout)),
        ExecutionMode::Realtime => Ok(run_threaded(graph, true, timeout)),
    }
}

fn run_sequential<M: Send + Clone + 'static>(graph: NodeGraph<M>, order: &[usize]) -> GraphRun<M> {
    let started = Instant::now();
    let NodeGraph { mut nodes, .. } = graph;
    let mut queues: HashMap<String, VecDeque<M>> = HashMap::new();
    let mut recorders: Vec<Recorder> = nodes.iter().map(|_| Recorder::default()).collect();
    let mut outputs = Vec::new();
    let mut failure = None;
    let sources: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| matches!(nodes[i].func, NodeFn::Source(_)))
        .collect();
    let mut live_sources = sources.clone();
    'outer: while !live_sources.is_empty() {
        let mut still = Vec::new();
        for &i in &live_sources {
            let node = &mut nodes[i];
            let t0 = Instant::now();
            let NodeFn::Source(f) = &mut node.func else {
                unreachable!()
            };
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
            match r {
                Ok(Ok(Some(m))) => {
                    recorders[i].record(t0);
                    for c in &node.outputs {
                        queues.entry(c.clone()).or_default().push_back(m.clone());
                    }
                    still.push(i);
                }
                Ok(Ok(None)) => {}
                Ok(Err(e)) => {
                    failure = Some(format!("node '{}': {e}", node.name));
                    break 'outer;
                }
                Err(p) => {
                    failure = Some(format!("node '{}' panicked: {}", node.name, panic_message(p)));
                    break 'outer;
                }
            }
        }
        live_sources = still;
        for &i in order {
            let node = &mut nodes[i];
            let NodeFn::Stage(f) = &mut node.func else {
                continue;
            };
            while node
                .inputs
                .iter()
                .all(|c| queues.get(c).is_some_and(|q| !q.is_empty()))
            {
                let inputs: Vec<M> = node
                    .inputs
                    .iter()
                    .map(|c| queues.get_mut(c).unwrap().pop_front().unwrap())
                    .collect();
                let t0 = Instant::now();
                match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(inputs))) {
                    Ok(Ok(m)) => {
                        recorders[i].record(t0);
                        if node.outputs.is_empty() {
                            outputs.push(m);
                        } else {
                            for c in &node.outputs {
                                queues.entry(c.clone()).or_default().push_back(m.clone());
                            }
                        }
                    }
                    Ok(Err(e)) => {
                        failure = Some(format!("node '{}': {e}", node.name));
                        break 'outer;
                    }
                    Err(p) => {
                        failure = Some(format!("node '{}' panicked: {}", node.name, panic_message(p)));
                        break 'outer;
                    }
                }
            }
        }
    }
    let nodes_t = nodes
        .iter()
        .zip(recorders)
        .map(|(n, r)| r.finish(&n.name, 0))
        .collect();
    finish_run(outputs, nodes_t, started, failure)
}

fn finish_run<M>(
    outputs: Vec<M>,
    nodes: Vec<NodeTelemetry>,
    started: Instant,
    failure: Option<String>,
) -> GraphRun<M> {
    let wall = started.elapsed().as_secs_f64();
    let n = outputs.len() as u64;
    GraphRun {
        outputs,
        telemetry: StageTelemetry {
            nodes,
            wall_time_s: wall,
            outputs: n,
            end_to_end_hz: if wall > 0.0 { n as f64 / wall } else { 0.0 },
        },
        failure,
    }
}

struct OutPort<M> {
    tx: Sender<M>,
    /// Receiver clone used to evict the oldest message.
    evict: Option<Receiver<M>>,
    drops: Arc<AtomicU64>,
}

impl<M> OutPort<M> {
    /// Returns false once the consumer is gone.
    fn send(&self, mut m: M) -> bool {
        match &self.evict {
            None => self.tx.send(m).is_ok(),
            Some(rx) => loop {
                match self.tx.try_send(m) {
                    Ok(()) => return true,
                    Err(TrySendError::Disconnected(_)) => return false,
                    Err(TrySendError::Full(back)) => {
                        if rx.try_recv().is_ok() {
                            self.drops.fetch_add(1, Ordering::Relaxed);
                        }
                        m = back;
                    }
                }
            },
        }
    }
}

enum Done<M> {
    Node(usize, Recorder, Option<String>),
    Output(M),
}

fn run_threaded<M: Send + Clone + 'static>(
    graph: NodeGraph<M>,
    latest_wins: bool,
    timeout: Duration,
) -> GraphRun<M> {
    let started = Instant::now();
    let NodeGraph { nodes, channels } = graph;
    let mut senders: HashMap<String, OutPort<M>> = HashMap::new();
    let mut receivers: HashMap<String, (Receiver<M>, Arc<AtomicU64>)> = HashMap::new();
    for c in &channels {
        let evicting = latest_wins && c.overflow == Overflow::LatestWins;
        let (tx, rx) = bounded(if evicting { 1 } else { c.capacity });
        let drops = Arc::new(AtomicU64::new(0));
        senders.insert(
            c.name.clone(),
            OutPort {
                tx,
                evict: evicting.then(|| rx.clone()),
                drops: drops.clone(),
            },
        );
        receivers.insert(c.name.clone(), (rx, drops));
    }
    let names: Vec<String> = nodes.iter().map(|n| n.name.clone()).collect();
    let mut drop_counters: Vec<Vec<Arc<AtomicU64>>> = Vec::new();
    let (done_tx, done_rx) = crossbeam_channel::unbounded::<Done<M>>();
    let n_nodes = nodes.len();
    for (i, node) in nodes.into_iter().enumerate() {
        let outs: Vec<OutPort<M>> = node
            .outputs
            .iter()
            .map(|c| senders.remove(c).expect("validated"))
            .collect();
        let ins: Vec<Receiver<M>> = node
            .inputs
            .iter()
            .map(|c| {
                let (rx, d) = receivers.remove(c).expect("validated");
                (rx, d)
            })
            .map(|(rx, d)| {
                drop_counters.resize_with(i + 1, Vec::new);
                drop_counters[i].push(d);
                rx
            })
            .collect();
        let done = done_tx.clone();
        let name = node.name.clone();
        std::thread::Builder::new()
            .name(format!("node-{name}"))
            .spawn(move || {
                let mut rec = Recorder::default();
                let is_sink = outs.is_empty();
                let body = std::panic::AssertUnwindSafe(|| -> std::result::Result<(), String> {
                    match node.func {
                        NodeFn::Source(mut f) => loop {
                            let t0 = Instant::now();
                            match f() {
                                Ok(Some(m)) => {
                                    rec.record(t0);
                                    let mut alive = true;
                                    for o in &outs {
                                        alive &= o.send(m.clone());
                                    }
                                    if !alive {
                                        return Ok(());
                                    }
                                }
                                Ok(None) => return Ok(()),
                                Err(e) => return Err(format!("node '{name}': {e}")),
                            }
                        },
                        NodeFn::Stage(mut f) => loop {
                            let mut inputs = Vec::with_capacity(ins.len());
                            for rx in &ins {
                                match rx.recv() {
                                    Ok(m) => inputs.push(m),
                                    Err(_) => return Ok(()),
                                }
                            }
                            let t0 = Instant::now();
                            let m = f(inputs).map_err(|e| format!("node '{name}': {e}"))?;
                            rec.record(t0);
                            if is_sink {
                                let _ = done.send(Done::Output(m));
                            } else {
                                let mut alive = true;
                                for o in &outs {
                                    alive &= o.send(m.clone());
                                }
                                if !alive {
                                    return Ok(());
                                }
                            }
                        },
                    }
                });
                let failure = match std::panic::catch_unwind(body) {
                    Ok(Ok(())) => None,
                    Ok(Err(e)) => Some(e),
                    Err(p) => Some(format!("node '{name}' panicked: {}", panic_message(p))),
                };
                // Close channels before reporting so neighbours unblock.
                drop(outs);
                drop(ins);
                let _ = done.send(Done::Node(i, rec, failure));
            })
            .expect("spawn node thread");
    }
    drop(done_tx);
    drop_counters.resize_with(n_nodes, Vec::new);

    let deadline = started + timeout;
    let mut outputs = Vec::new();
    let mut recorders: Vec<Option<Recorder>> = (0..n_nodes).map(|_| None).collect();
    let mut failure: Option<String> = None;
    let mut finished = 0;
    while finished < n_nodes {
        match done_rx.recv_deadline(deadline) {
            Ok(Done::Output(m)) => outputs.push(m),
            Ok(Done::Node(i, rec, f)) => {
                recorders[i] = Some(rec);
                if failure.is_none() {
                    failure = f;
                }
                finished += 1;
            }
            Err(RecvTimeoutError::Timeout) => {
                failure.get_or_insert_with(|| {
                    format!("pipeline did not shut down within {:.1} s", timeout.as_secs_f64())
                });
                break;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    let nodes_t = recorders
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let drops = drop_counters[i].iter().map(|d| d.load(Ordering::Relaxed)).sum();
            r.unwrap_or_default().finish(&names[i], drops)
        })
        .collect();
    finish_run(outputs, nodes_t, started, failure)
}

// ---------------------------------------------------------------------------
// Standard teleoperation topology

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandRetargeterKind {
    Nn,
    Gd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: ExecutionMode,
    pub hand_retargeter: HandRetargeterKind,
    /// In realtime mode, replay records at their recorded timestamps.
    pub pace: bool,
    /// Channel capacity in lockstep mode.
    pub channel_capacity: usize,
    pub shutdown_timeout_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: ExecutionMode::Realtime,
            hand_retargeter: HandRetargeterKind::Nn,
            pace: true,
            channel_capacity: 16,
            shutdown_timeout_s: 60.0,
        }
    }
}

/// Everything the standard graph needs besides its input.
#[derive(Clone)]
pub struct PipelineContext {
    pub hand_chain: Arc<KinematicChain>,
    pub arm_chain: Arc<KinematicChain>,
    pub hand_model: Arc<HandSkeletonModel>,
    pub body_model: Arc<BodySkeletonModel>,
    /// Required when the hand retargeter is `Nn`.
    pub network: Option<Arc<RetargeterNetwork>>,
    pub energy: EnergyConfig,
    pub gd: GdSettings,
    pub body: BodyRetargetConfig,
    pub control: ControlConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Clone, Debug)]
pub enum Payload {
    Pose(Arc<PoseRecord>),
    HandTarget(Vec<f64>),
    ArmTarget(Option<EndEffectorTarget>),
    HandSteps(Vec<Vec<f64>>),
    ArmSteps { qs: Vec<Vec<f64>>, converged: Vec<bool> },
    Frames(Vec<CommandFrame>),
    Tick,
}

#[derive(Clone, Debug)]
pub struct Packet {
    pub seq: u64,
    pub t: f64,
    pub payload: Payload,
}

pub const SOURCE_NODE: &str = "source";
pub const HAND_RETARGET_NODE: &str = "hand_retarget";
pub const BODY_RETARGET_NODE: &str = "body_retarget";
pub const HAND_CONTROLLER_NODE: &str = "hand_controller";
pub const ARM_CONTROLLER_NODE: &str = "arm_controller";
pub const SINK_NODE: &str = "sink";

fn unexpected(node: &str, p: &Payload) -> Error {
    Error::Pipeline(format!("{node}: unexpected message {p:?}"))
}

fn pose_of<'a>(node: &str, inputs: &'a [Packet]) -> Result<&'a Arc<PoseRecord>> {
    match &inputs[0].payload {
        Payload::Pose(p) => Ok(p),
        other => Err(unexpected(node, other)),
    }
}

/// source -> {hand_retarget, body_retarget} -> {hand_controller,
/// arm_controller} -> sink.
pub fn standard_graph(ctx: &PipelineContext, records: Vec<PoseRecord>) -> Result<NodeGraph<Packet>> {
    ctx.control.validate()?;
    ctx.body.validate()?;
    let mode = ctx.pipeline.mode;
    let overflow = Overflow::LatestWins;
    let cap = ctx.pipeline.channel_capacity.max(1);
    let mut g = NodeGraph::new();
    for c in [
        "pose_hand",
        "pose_body",
        "hand_target",
        "arm_target",
        "hand_steps",
        "arm_steps",
    ] {
        g.channel(c, cap, overflow);
    }

    let pace = mode == ExecutionMode::Realtime && ctx.pipeline.pace;
    let mut iter = records.into_iter().map(Arc::new).enumerate();
    let mut clock: Option<(Instant, f64)> = None;
    g.source(
        SOURCE_NODE,
        &["pose_hand", "pose_body"],
        Box::new(move || {
            let Some((seq, rec)) = iter.next() else {
                return Ok(None);
            };
            if pace {
                let (start, t0) = *clock.get_or_insert((Instant::now(), rec.t));
                let due = start + Duration::from_secs_f64((rec.t - t0).max(0.0));
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
            }
            Ok(Some(Packet {
                seq: seq as u64,
                t: rec.t,
                payload: Payload::Pose(rec),
            }))
        }),
    );

    let hand_stage: StageFn<Packet> = match ctx.pipeline.hand_retargeter {
        HandRetargeterKind::Nn => {
            let net = ctx
                .network
                .clone()
                .ok_or_else(|| Error::Config("hand retargeter 'nn' needs a network weight file".into()))?;
            if net.limits().len() != ctx.hand_chain.dof() {
                return Err(Error::Config(format!(
                    "network has {} outputs but the hand chain has {} joints",
                    net.limits().len(),
                    ctx.hand_chain.dof()
                )));
            }
            Box::new(move |inputs: Vec<Packet>| {
                let rec = pose_of(HAND_RETARGET_NODE, &inputs)?;
                Ok(Packet {
                    payload: Payload::HandTarget(retarget_nn(&net, &rec.hand)),
                    ..inputs[0].clone()
                })
            })
        }
        HandRetargeterKind::Gd => {
            let mut settings = ctx.gd.clone();
            if mode != ExecutionMode::Realtime {
                // A wall-clock cap would make the output timing dependent.
                settings.time_budget_ms = None;
            }
            let mut state = GdSolverState::new(ctx.hand_chain.dof(), settings);
            let (chain, model, cfg) = (ctx.hand_chain.clone(), ctx.hand_model.clone(), ctx.energy.clone());
            Box::new(move |inputs: Vec<Packet>| {
                let rec = pose_of(HAND_RETARGET_NODE, &inputs)?;
                let kv = human_keyvectors(&model, &rec.hand, &cfg)?;
                let q = retarget_gd(&mut state, &kv, &chain, &cfg)?;
                Ok(Packet {
                    payload: Payload::HandTarget(q),
                    ..inputs[0].clone()
                })
            })
        }
    };
    g.stage(HAND_RETARGET_NODE, &["pose_hand"], &["hand_target"], hand_stage);

    let (body_model, body_cfg) = (ctx.body_model.clone(), ctx.body.clone());
    g.stage(
        BODY_RETARGET_NODE,
        &["pose_body"],
        &["arm_target"],
        Box::new(move |inputs: Vec<Packet>| {
            let rec = pose_of(BODY_RETARGET_NODE, &inputs)?;
            let target = match &rec.body {
                None => None,
                Some(body) => {
                    let wrist = wrist_relative_to_torso(&body_model, body)?;
                    Some(map_wrist_to_target(&wrist, &body_cfg, rec.t)?)
                }
            };
            Ok(Packet {
                payload: Payload::ArmTarget(target),
                ..inputs[0].clone()
            })
        }),
    );

    let hand_step = ctx.control.hand_max_joint_step_rad;
    let mut hand_q = vec![0.0; ctx.hand_chain.dof()];
    ctx.hand_chain.clamp_to_limits(&mut hand_q);
    g.stage(
        HAND_CONTROLLER_NODE,
        &["hand_target"],
        &["hand_steps"],
        Box::new(move |inputs: Vec<Packet>| {
            let Payload::HandTarget(target) = &inputs[0].payload else {
                return Err(unexpected(HAND_CONTROLLER_NODE, &inputs[0].payload));
            };
            let steps = stream_hand_command(&hand_q, target, hand_step)?;
            hand_q = target.clone();
            Ok(Packet {
                payload: Payload::HandSteps(steps),
                ..inputs[0].clone()
            })
        }),
    );

    let mut arm = ArmController::new(ctx.arm_chain.clone(), &ctx.control)?;
    g.stage(
        ARM_CONTROLLER_NODE,
        &["arm_target"],
        &["arm_steps"],
        Box::new(move |inputs: Vec<Packet>| {
            let Payload::ArmTarget(target) = &inputs[0].payload else {
                return Err(unexpected(ARM_CONTROLLER_NODE, &inputs[0].payload));
            };
            let (qs, converged) = arm.step(target.as_ref())?;
            Ok(Packet {
                payload: Payload::ArmSteps { qs, converged },
                ..inputs[0].clone()
            })
        }),
    );

    let mut last_t: Option<f64> = None;
    g.stage(
        SINK_NODE,
        &["hand_steps", "arm_steps"],
        &[],
        Box::new(move |inputs: Vec<Packet>| {
            let (h, a) = (&inputs[0], &inputs[1]);
            let (Payload::HandSteps(hand), Payload::ArmSteps { qs, converged }) = (&h.payload, &a.payload)
            else {
                return Err(Error::Pipeline("sink: unexpected message pair".into()));
            };
            let newest = if h.seq >= a.seq { h } else { a };
            let n = hand.len().max(qs.len());
            let t_end = newest.t;
            let t_start = last_t.unwrap_or(t_end);
            let frames: Vec<CommandFrame> = (0..n)
                .map(|k| CommandFrame {
                    t: if k + 1 == n {
                        t_end
                    } else {
                        t_start + (t_end - t_start) * (k + 1) as f64 / n as f64
                    },
                    arm_q: qs[k.min(qs.len() - 1)].clone(),
                    hand_q: hand[k.min(hand.len() - 1)].clone(),
                    src_seq: newest.seq,
                    ik_converged: converged[k.min(converged.len() - 1)],
                })
                .collect();
            last_t = Some(t_end);
            Ok(Packet {
                payload: Payload::Frames(frames),
                ..newest.clone()
            })
        }),
    );
    Ok(g)
}

/// Arm command stack: clip, EMA, waypoints, IK per waypoint.
pub struct ArmController {
    chain: Arc<KinematicChain>,
    cfg: ControlConfig,
    smoother: SmootherState,
    q: Vec<f64>,
    commanded: Transform3,
}

impl ArmController {
    /// Starts at the all-zero joint configuration.
    pub fn new(chain: Arc<KinematicChain>, cfg: &ControlConfig) -> Result<Self> {
        let mut q = vec![0.0; chain.dof()];
        chain.clamp_to_limits(&mut q);
        let commanded = end_effector_pose(&chain, &q)?;
        Ok(ArmController {
            smoother: cfg.smoother()?,
            cfg: cfg.clone(),
            chain,
            q,
            commanded,
        })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Joint vectors for each waypoint towards `target`, with per-waypoint
    /// convergence flags. With no target the arm holds still.
    pub fn step(&mut self, target: Option<&EndEffectorTarget>) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let Some(target) = target else {
            return Ok((vec![self.q.clone()], vec![true]));
        };
        let reference = self.smoother.p_ema.unwrap_or(self.commanded);
        let clipped = clip_outlier(&reference, &target.pose, &self.smoother);
        let filtered = ema_update(&mut self.smoother, &clipped);
        let waypoints = interpolate_waypoints(&self.commanded, &filtered, self.cfg.max_step())?;
        let mut qs = Vec::with_capacity(waypoints.len());
        let mut flags = Vec::with_capacity(waypoints.len());
        for wp in waypoints {
            let r = sdls_ik(
                &self.chain,
                &self.q,
                &EndEffectorTarget {
                    pose: wp,
                    timestamp: target.timestamp,
                },
                &self.cfg.ik,
            )?;
            self.q = r.q.clone();
            qs.push(r.q);
            flags.push(r.converged);
        }
        self.commanded = filtered;
        Ok((qs, flags))
    }
}

pub struct PipelineRun {
    pub frames: Vec<CommandFrame>,
    pub telemetry: StageTelemetry,
    pub failure: Option<String>,
}

/// Runs the standard graph over `records` in the configured mode.
pub fn run_pipeline(ctx: &PipelineContext, records: Vec<PoseRecord>) -> Result<PipelineRun> {
    let graph = standard_graph(ctx, records)?;
    let run = run_graph(
        graph,
        ctx.pipeline.mode,
        Duration::from_secs_f64(ctx.pipeline.shutdown_timeout_s.max(0.001)),
    )?;
    let mut frames = Vec::new();
    for p in run.outputs {
        if let Payload::Frames(f) = p.payload {
            frames.extend(f);
        }
    }
    Ok(PipelineRun {
        frames,
        telemetry: run.telemetry,
        failure: run.failure,
    })
}

/// Source emitting `messages` ticks into a chain of `stages` nodes that each
/// sleep for `delay`. The last node is the sink.
pub fn delay_chain(messages: usize, stages: usize, delay: Duration) -> NodeGraph<Packet> {
    let mut g = NodeGraph::new();
    let mut next = 0u64;
    g.source(
        SOURCE_NODE,
        &["c0"],
        Box::new(move || {
            if next as usize >= messages {
                return Ok(None);
            }
            next += 1;
            Ok(Some(Packet {
                seq: next - 1,
                t: (next - 1) as f64,
                payload: Payload::Tick,
            }))
        }),
    );
    for s in 0..stages {
        let input = format!("c{s}");
        let output = format!("c{}", s + 1);
        g.channel(&input, 1, Overflow::LatestWins);
        let outs: Vec<&str> = if s + 1 == stages {
            vec![]
        } else {
            vec![output.as_str()]
        };
        g.stage(
            &format!("stage{s}"),
            &[input.as_str()],
            &outs,
            Box::new(move |mut inputs: Vec<Packet>| {
                std::thread::sleep(delay);
                Ok(inputs.pop().expect("one input"))
            }),
        );
    }
    g
}

/// Resolved output path for a sidecar file next to `path`.
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    /// One sampled hand pose held still, body at rest.
    Static,
    /// Hand held still while the right arm swings forward and back.
    SlowReach,
    /// Fingers close from flat to a fist, body at rest.
    GraspClose,
}

impl StreamKind {
    pub const ALL: [StreamKind; 3] = [StreamKind::Static, StreamKind::SlowReach, StreamKind::GraspClose];

    pub fn file_stem(self) -> &'static str {
        match self {
            StreamKind::Static => "static",
            StreamKind::SlowReach => "slow_reach",
            StreamKind::GraspClose => "grasp_close",
        }
    }
}

/// Synthetic pose stream of `frames` records at `rate_hz`.
pub fn synthetic_stream(
    model: &HandSkeletonModel,
    kind: StreamKind,
    frames: usize,
    rate_hz: f64,
    seed: u64,
) -> Result<Vec<PoseRecord>> {
    use crate::human_model::{sample_hand_pose, SamplerConfig, HAND_JOINTS};
    if !(rate_hz > 0.0) {
        return Err(Error::InvalidInput("rate must be positive".into()));
    }
    let base = sample_hand_pose(model, seed, &SamplerConfig::default());
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let s = if frames > 1 {
            k as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        // Smooth 0 -> 1 ramp.
        let ramp = 0.5 - 0.5 * (std::f64::consts::PI * s).cos();
        let mut hand = base.clone();
        let mut body = HumanBodyPose::rest();
        match kind {
            StreamKind::Static => {}
            StreamKind::SlowReach => {
                // Out and back: shoulder flexes forward while the elbow opens.
                let swing = (std::f64::consts::PI * s).sin();
                body.theta[17] = Rotation3::about_y(-0.9 * swing);
                body.theta[19] = Rotation3::about_y(0.5 * swing);
            }
            StreamKind::GraspClose => {
                hand = HumanHandPose::flat();
                hand.beta = base.beta.clone();
                for slot in 0..HAND_JOINTS {
                    if let Some(lim) = model.slot_limits(slot) {
                        hand.theta[3 * slot + 1] = ramp * 0.8 * lim[1][1];
                    }
                }
            }
        }
        out.push(PoseRecord {
            t: k as f64 / rate_hz,
            hand,
            body: Some(body),
        });
    }
    Ok(out)
}
