use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use telekinesis::collision::{generate_labeled_configs, train_collision_classifier, CollisionClassifier};
use telekinesis::config::Config;
use telekinesis::evaluation::{
    bench_stages, eval_oracle_rmse, sample_dataset, sweep_collision_weight_with, time_retargeters,
    BenchReport, EvalInputs, SweepInputs,
};
use telekinesis::network::weights_checksum;
use telekinesis::pipeline::{
    read_pose_records, run_pipeline, synthetic_stream, write_command_stream, write_pose_stream,
    ExecutionMode, HandRetargeterKind, StreamKind,
};
use telekinesis::retargeter::{prepare_poses, train_retargeter_prepared, RetargeterNetwork};
use telekinesis::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_PIPELINE: u8 = 3;
const EXIT_TRAINING: u8 = 4;
const EXIT_ORDERING: u8 = 5;

#[derive(Parser)]
#[command(
    name = "telekinesis",
    version,
    about = "Hand and arm retargeting for teleoperation"
)]
struct Cli {
    /// Layered TOML config; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set control.alpha=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sets every training, data and oracle seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the teleoperation pipeline over a recorded pose stream.
    #[command(
        after_help = "Config keys: paths.models_dir, paths.retargeter_weights, energy.*, gd.*, \
body_retarget.*, control.*, control.ik.*, pipeline.*"
    )]
    Retarget(RetargetArgs),
    /// Train the hand retargeting network.
    #[command(
        after_help = "Config keys: paths.models_dir, paths.collision_weights, energy.*, sampler.*, \
retargeter_data.{poses,seed}, retargeter_training.*"
    )]
    TrainRetargeter(TrainRetargeterArgs),
    /// Label random hand configurations and train the self-collision classifier.
    #[command(
        after_help = "Config keys: paths.models_dir, collision_data.{samples,seed}, collision_training.*"
    )]
    TrainCollision(TrainCollisionArgs),
    /// Compare network and online-GD outputs against the oracle.
    #[command(
        after_help = "Config keys: paths.models_dir, paths.retargeter_weights, energy.*, sampler.*, \
oracle.*, gd.*, eval.{eval_poses,eval_seed}"
    )]
    EvalOracle(EvalOracleArgs),
    /// Train one network per collision weight and tabulate the tradeoff.
    #[command(
        after_help = "Config keys: paths.models_dir, paths.collision_weights, energy.*, sampler.*, \
retargeter_data.*, retargeter_training.*, eval.{sweep_poses,sweep_seed,lambdas}"
    )]
    SweepCollision(SweepArgs),
    /// Time each pipeline stage and the two hand retargeters.
    #[command(
        after_help = "Config keys: paths.models_dir, paths.retargeter_weights, retargeter_training.hidden, \
energy.*, gd.*, body_retarget.*, control.*, pipeline.*"
    )]
    Bench(BenchArgs),
    /// Write the synthetic pose-stream fixtures.
    #[command(after_help = "Config keys: paths.models_dir")]
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum HandMode {
    Nn,
    Gd,
}

#[derive(Args)]
struct RetargetArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "nn")]
    mode: HandMode,
    /// Deterministic single-slot handoff between stages; overrides pipeline.mode.
    #[arg(long)]
    lockstep: bool,
    /// Retargeter weights; overrides paths.retargeter_weights.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct TrainRetargeterArgs {
    #[arg(long)]
    out: PathBuf,
    /// Collision-loss weight; overrides retargeter_training.lambda.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides retargeter_data.poses.
    #[arg(long)]
    poses: Option<usize>,
    /// Classifier weights; overrides paths.collision_weights.
    #[arg(long)]
    collision_weights: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCollisionArgs {
    #[arg(long)]
    out: PathBuf,
    /// Overrides collision_data.samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Also write the labeled configurations as CSV.
    #[arg(long)]
    data_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalOracleArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Overrides eval.eval_poses.
    #[arg(long)]
    poses: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    collision_weights: Option<PathBuf>,
    /// Overrides retargeter_training.epochs for every sweep network.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides retargeter_data.poses.
    #[arg(long)]
    poses: Option<usize>,
    /// Overrides eval.sweep_poses.
    #[arg(long)]
    heldout: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Pose stream to replay; a synthetic static stream when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Network weights; a freshly initialized network of the configured
    /// shape is timed when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nn")]
    mode: HandMode,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 45)]
    frames: usize,
    #[arg(long, default_value_t = 30.0)]
    rate_hz: f64,
}

/// Error with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::Training(_) => EXIT_TRAINING,
            Error::Pipeline(_) | Error::Solver(_) | Error::Degenerate(_) => EXIT_PIPELINE,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = Config::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Retarget(a) => retarget(cfg, a),
        Command::TrainRetargeter(a) => train_retargeter(cfg, a),
        Command::TrainCollision(a) => train_collision(cfg, a),
        Command::EvalOracle(a) => eval_oracle(cfg, a),
        Command::SweepCollision(a) => sweep(cfg, a),
        Command::Bench(a) => bench(cfg, a),
        Command::GenData(a) => gen_data(cfg, cli.seed.unwrap_or(11), a),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn load_network(path: Option<&Path>) -> CliResult<Arc<RetargeterNetwork>> {
    let path = path.ok_or_else(|| {
        fail(
            EXIT_CONFIG,
            "network mode needs retargeter weights (--weights or paths.retargeter_weights)",
        )
    })?;
    Ok(Arc::new(RetargeterNetwork::load(path)?))
}

fn load_classifier(path: Option<&Path>) -> CliResult<CollisionClassifier> {
    let path = path.ok_or_else(|| {
        fail(
            EXIT_CONFIG,
            "a collision weight above 0 needs classifier weights (--collision-weights or paths.collision_weights)",
        )
    })?;
    Ok(CollisionClassifier::load(path)?)
}

/// Config hash plus checksums of the model files in use.
fn provenance(cfg: &Config) -> CliResult<BTreeMap<String, String>> {
    let mut p = BTreeMap::new();
    p.insert("config_sha256".to_string(), cfg.hash());
    for (name, sum) in cfg.model_store().checksums()? {
        p.insert(format!("model:{name}"), sum);
    }
    Ok(p)
}

fn retarget(mut cfg: Config, a: RetargetArgs) -> CliResult {
    if a.lockstep {
        cfg.pipeline.mode = ExecutionMode::Lockstep;
    }
    if let Some(w) = a.weights {
        cfg.paths.retargeter_weights = Some(w);
    }
    cfg.pipeline.hand_retargeter = match a.mode {
        HandMode::Nn => HandRetargeterKind::Nn,
        HandMode::Gd => HandRetargeterKind::Gd,
    };
    let network = match a.mode {
        HandMode::Nn => Some(load_network(cfg.paths.retargeter_weights.as_deref())?),
        HandMode::Gd => None,
    };
    let records = read_pose_records(&a.input)?;
    let ctx = cfg.pipeline_context(network)?;
    let run = run_pipeline(&ctx, records).map_err(|e| fail(EXIT_PIPELINE, e.to_string()))?;
    write_command_stream(&run.frames, &a.out)?;
    cfg.write_sidecar(&a.out)?;
    println!(
        "{:<16} {:>8} {:>10} {:>10} {:>8}",
        "stage", "msgs", "mean_ms", "hz", "drops"
    );
    for n in &run.telemetry.nodes {
        println!(
            "{:<16} {:>8} {:>10.3} {:>10.1} {:>8}",
            n.name, n.processed, n.mean_latency_ms, n.throughput_hz, n.drops
        );
    }
    println!(
        "{} frames in {:.2} s ({:.1} Hz end to end)",
        run.frames.len(),
        run.telemetry.wall_time_s,
        run.telemetry.end_to_end_hz
    );
    match run.failure {
        Some(f) => Err(fail(EXIT_PIPELINE, format!("pipeline failed: {f}"))),
        None => Ok(()),
    }
}

fn train_retargeter(mut cfg: Config, a: TrainRetargeterArgs) -> CliResult {
    if let Some(l) = a.lambda {
        cfg.retargeter_training.lambda = l;
    }
    if let Some(e) = a.epochs {
        cfg.retargeter_training.epochs = e;
    }
    if let Some(n) = a.poses {
        cfg.retargeter_data.poses = n;
    }
    if let Some(w) = a.collision_weights {
        cfg.paths.collision_weights = Some(w);
    }
    let store = cfg.model_store();
    let (model, chain) = (store.human_hand()?, store.hand_chain()?);
    let classifier = if cfg.retargeter_training.lambda > 0.0 {
        Some(load_classifier(cfg.paths.collision_weights.as_deref())?)
    } else {
        None
    };
    let poses = sample_dataset(
        &model,
        &cfg.sampler,
        cfg.retargeter_data.poses,
        cfg.retargeter_data.seed,
    );
    let data = prepare_poses(&model, &poses, &cfg.energy)?;
    let (net, log) = train_retargeter_prepared(
        &data,
        &cfg.retargeter_training,
        classifier.as_ref(),
        &chain,
        &cfg.energy,
    )?;
    net.save(&a.out)?;
    log.write_jsonl(&telekinesis::pipeline::sidecar_path(&a.out, ".log.jsonl"))?;
    cfg.write_sidecar(&a.out)?;
    if let Some(last) = log.epochs.last() {
        println!(
            "epoch {}: mean energy {:.4e}, mean collision score {:.4}",
            last.epoch, last.mean_energy, last.mean_collision_score
        );
    }
    println!(
        "weights {} sha256 {}",
        a.out.display(),
        weights_checksum(&net.to_weight_file())
    );
    Ok(())
}

fn train_collision(mut cfg: Config, a: TrainCollisionArgs) -> CliResult {
    if let Some(n) = a.samples {
        cfg.collision_data.samples = n;
    }
    if let Some(e) = a.epochs {
        cfg.collision_training.epochs = e;
    }
    let store = cfg.model_store();
    let chain = store.hand_chain()?;
    let geom = store.hand_collision(&chain)?;
    let data = generate_labeled_configs(&geom, &chain, cfg.collision_data.samples, cfg.collision_data.seed)?;
    if let Some(p) = &a.data_out {
        data.write_csv(p)?;
    }
    let limits: Vec<(f64, f64)> = chain.joints().iter().map(|j| (j.lower, j.upper)).collect();
    let (clf, report) = train_collision_classifier(&data, &limits, &cfg.collision_training)?;
    clf.save(&a.out)?;
    write_text(
        &telekinesis::pipeline::sidecar_path(&a.out, ".report.json"),
        &to_json(&report),
    )?;
    cfg.write_sidecar(&a.out)?;
    println!(
        "final loss {:.4}, train accuracy {:.4}, held-out accuracy {:.4} on {} samples",
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.train_accuracy,
        report.holdout_accuracy,
        report.holdout_size
    );
    println!(
        "weights {} sha256 {}",
        a.out.display(),
        weights_checksum(&clf.to_weight_file())
    );
    Ok(())
}

fn eval_oracle(mut cfg: Config, a: EvalOracleArgs) -> CliResult {
    if let Some(w) = a.weights {
        cfg.paths.retargeter_weights = Some(w);
    }
    if let Some(n) = a.poses {
        cfg.eval.eval_poses = n;
    }
    let net = load_network(cfg.paths.retargeter_weights.as_deref())?;
    let store = cfg.model_store();
    let (model, chain) = (store.human_hand()?, store.hand_chain()?);
    let poses = sample_dataset(&model, &cfg.sampler, cfg.eval.eval_poses, cfg.eval.eval_seed);
    let inputs = EvalInputs {
        poses: &poses,
        dataset: "synthetic hand poses (pose sampler)".into(),
        seed: cfg.eval.eval_seed,
        model: &model,
        chain: &chain,
        energy: &cfg.energy,
    };
    let mut report = eval_oracle_rmse(&inputs, &net, &cfg.gd, &cfg.oracle)?;
    report.provenance = provenance(&cfg)?;
    report.provenance.insert(
        "retargeter_weights".into(),
        weights_checksum(&net.to_weight_file()),
    );
    create_dir(&a.out_dir)?;
    let out = a.out_dir.join("eval_report.json");
    write_text(&out, &to_json(&report))?;
    cfg.write_sidecar(&out)?;
    for m in &report.methods {
        println!(
            "{:<8} rmse {:.4} rad  energy {:.4e}  median {:.3} ms",
            m.method, m.rmse_rad, m.mean_energy, m.median_ms
        );
    }
    let rmse = |name: &str| report.method(name).map(|m| m.rmse_rad).unwrap_or(f64::NAN);
    if rmse("nn") <= rmse("gd") {
        Ok(())
    } else {
        Err(fail(
            EXIT_ORDERING,
            format!("network RMSE {:.4} exceeds GD RMSE {:.4}", rmse("nn"), rmse("gd")),
        ))
    }
}

fn sweep(mut cfg: Config, a: SweepArgs) -> CliResult {
    if let Some(e) = a.epochs {
        cfg.retargeter_training.epochs = e;
    }
    if let Some(n) = a.poses {
        cfg.retargeter_data.poses = n;
    }
    if let Some(n) = a.heldout {
        cfg.eval.sweep_poses = n;
    }
    if let Some(w) = a.collision_weights {
        cfg.paths.collision_weights = Some(w);
    }
    let store = cfg.model_store();
    let (model, chain) = (store.human_hand()?, store.hand_chain()?);
    let geom = store.hand_collision(&chain)?;
    let classifier = load_classifier(cfg.paths.collision_weights.as_deref())?;
    let train_poses = sample_dataset(
        &model,
        &cfg.sampler,
        cfg.retargeter_data.poses,
        cfg.retargeter_data.seed,
    );
    let held = sample_dataset(&model, &cfg.sampler, cfg.eval.sweep_poses, cfg.eval.sweep_seed);
    let train = prepare_poses(&model, &train_poses, &cfg.energy)?;
    let heldout = prepare_poses(&model, &held, &cfg.energy)?;
    let inputs = SweepInputs {
        train: &train,
        heldout: &heldout,
        classifier: &classifier,
        geometry: &geom,
        chain: &chain,
        energy: &cfg.energy,
    };
    create_dir(&a.out_dir)?;
    let mut checksums = BTreeMap::new();
    let curve = sweep_collision_weight_with(
        &cfg.eval.lambdas,
        &inputs,
        &cfg.retargeter_training,
        |row, net| {
            let path = a.out_dir.join(format!("retargeter_lambda_{}.w16", row.lambda));
            net.save(&path)?;
            checksums.insert(
                format!("lambda {}", row.lambda),
                weights_checksum(&net.to_weight_file()),
            );
            Ok(())
        },
    )?;
    let csv = a.out_dir.join("tradeoff.csv");
    write_text(&csv, &curve.to_csv())?;
    cfg.write_sidecar(&csv)?;
    let mut prov = provenance(&cfg)?;
    prov.insert(
        "collision_weights".into(),
        weights_checksum(&classifier.to_weight_file()),
    );
    prov.extend(checksums);
    let doc = serde_json::json!({
        "rows": curve.rows,
        "spearman_collision": curve.spearman_collision(),
        "spearman_energy": curve.spearman_energy(),
        "heldout_poses": cfg.eval.sweep_poses,
        "heldout_seed": cfg.eval.sweep_seed,
        "training_seed": cfg.retargeter_training.seed,
        "data_seed": cfg.retargeter_data.seed,
        "provenance": prov,
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    write_text(&a.out_dir.join("tradeoff.json"), &to_json(&doc))?;
    print!("{}", curve.to_csv());
    println!(
        "spearman(lambda, collision) {:.3}, spearman(lambda, energy) {:.3}",
        curve.spearman_collision(),
        curve.spearman_energy()
    );
    Ok(())
}

fn bench(mut cfg: Config, a: BenchArgs) -> CliResult {
    if let Some(w) = a.weights {
        cfg.paths.retargeter_weights = Some(w);
    }
    let store = cfg.model_store();
    let (model, chain) = (store.human_hand()?, store.hand_chain()?);
    let net = match &cfg.paths.retargeter_weights {
        Some(p) => Arc::new(RetargeterNetwork::load(p)?),
        None => Arc::new(RetargeterNetwork::init(
            &cfg.retargeter_training.hidden,
            &chain,
            cfg.retargeter_training.seed,
        )?),
    };
    let records = match &a.input {
        Some(p) => read_pose_records(p)?,
        None => synthetic_stream(&model, StreamKind::Static, 45, 30.0, 11)?,
    };
    cfg.pipeline.hand_retargeter = match a.mode {
        HandMode::Nn => HandRetargeterKind::Nn,
        HandMode::Gd => HandRetargeterKind::Gd,
    };
    let ctx = cfg.pipeline_context(Some(net.clone()))?;
    let stages = bench_stages(&ctx, &records, a.reps).map_err(|e| fail(EXIT_PIPELINE, e.to_string()))?;
    let poses: Vec<_> = records.iter().map(|r| r.hand.clone()).collect();
    let retargeters = if poses.is_empty() {
        None
    } else {
        Some(time_retargeters(
            &poses,
            &net,
            &model,
            &chain,
            &cfg.energy,
            a.reps,
        )?)
    };
    let report = BenchReport { stages, retargeters };
    create_dir(&a.out_dir)?;
    let csv = a.out_dir.join("bench.csv");
    write_text(&csv, &report.to_csv())?;
    cfg.write_sidecar(&csv)?;
    let doc = serde_json::json!({ "report": report, "provenance": provenance(&cfg)?, "reps": a.reps });
    write_text(&a.out_dir.join("bench.json"), &to_json(&doc))?;
    print!("{}", report.to_csv());
    if let Some(t) = &report.retargeters {
        println!(
            "nn {:.4} ms, gd-100 {:.3} ms per pose ({:.1}x)",
            t.nn_median_ms, t.gd_median_ms, t.speedup
        );
    }
    Ok(())
}

fn gen_data(cfg: Config, seed: u64, a: GenDataArgs) -> CliResult {
    let model = cfg.model_store().human_hand()?;
    create_dir(&a.out_dir)?;
    for kind in StreamKind::ALL {
        let records = synthetic_stream(&model, kind, a.frames, a.rate_hz, seed)?;
        let path = a.out_dir.join(format!("{}.jsonl", kind.file_stem()));
        write_pose_stream(&records, &path)?;
        println!("{} ({} records)", path.display(), records.len());
    }
    Ok(())
}
