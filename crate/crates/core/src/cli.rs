//! Batch entry point: generate → train → eval → closedloop → report, plus
//! a selftest that runs the gradient-check and oracle suites. Exit code 0
//! on success, 1 on usage errors, 2 on numerical failures; the last stdout
//! line is always a machine-parsable `result=...` status.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::closed_loop::{
    default_base_models, efficiency_report, run_closed_loop, ArchResult, BaseModelEfficiency,
    BestLoggedPolicy, ClosedLoopError, ConstantController, MpcOutcome,
};
use crate::dataset::{
    assemble_all, load_trajectories, save_trajectories, split_dataset, Dataset, SplitMode,
};
use crate::feeder::{diurnal_profile, generate_scenarios, FeederError, FeederSpec};
use crate::model::{build_model, Category, CellKind, Model, ModelSpec};
use crate::trainer::{evaluate_metrics, train, Metrics, TrainConfig, TrainError};
use crate::util::{derive_seed, fmt_f64};

#[derive(Parser)]
#[command(
    name = "adsmpc",
    version,
    about = "Feeder volt/VAr control pipeline",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate control scenarios and assemble the supervised dataset.
    Generate(GenerateArgs),
    /// Train one architecture on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Run the closed-loop efficiency experiment for a checkpoint.
    Closedloop(ClosedloopArgs),
    /// Collect metrics files into the leaderboard and efficiency tables.
    Report(ReportArgs),
    /// Run the built-in gradient-check and oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Plain-text config file of `key = value` lines; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Feeder description file; defaults to the built-in six-bus feeder.
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Number of scenario trajectories.
    #[arg(long)]
    scenarios: Option<usize>,
    /// Steps per scenario.
    #[arg(long)]
    steps: Option<usize>,
    /// Input sequence length.
    #[arg(long)]
    t: Option<usize>,
    /// Split mode: example | trajectory.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset CSV produced by `generate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Architecture, e.g. A-lstm, AM-dense, AM_simple-lstm, B-bilstm.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dk: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// LSTM stack depth (1 or 2).
    #[arg(long)]
    recurrent_layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Repeat-and-average count.
    #[arg(long)]
    repeats: Option<usize>,
    /// Worker threads for fanning out repeats.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ClosedloopArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Trajectory log from `generate`; feeds the reference-state policy.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Closed-loop steps.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Clone)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory holding per-architecture training outputs.
    #[arg(long)]
    runs: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SelftestArgs {
    #[command(flatten)]
    common: CommonArgs,
}

// ── Error plumbing and exit codes ──────────────────────────────────────

enum CliError {
    Usage(String),
    Numerical(String),
}

type CliResult<T> = Result<T, CliError>;

impl From<FeederError> for CliError {
    fn from(e: FeederError) -> CliError {
        match e {
            FeederError::Diverged { .. }
            | FeederError::VoltageCollapse { .. }
            | FeederError::TrajectoryStep { .. }
            | FeederError::UndefinedEfficiency => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> CliError {
        CliError::Usage(e.to_string())
    }
}

impl From<crate::dataset::DatasetError> for CliError {
    fn from(e: crate::dataset::DatasetError) -> CliError {
        CliError::Usage(e.to_string())
    }
}

impl From<ClosedLoopError> for CliError {
    fn from(e: ClosedLoopError) -> CliError {
        match e {
            ClosedLoopError::Step { .. } | ClosedLoopError::NonFinite(_) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn io_usage(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

/// Parse argv (without the program name) and run. Returns the exit code.
pub fn run_command(args: &[String]) -> u8 {
    let mut argv = vec!["adsmpc".to_string()];
    argv.extend_from_slice(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                println!("result=ok cmd=help");
                return 0;
            }
            eprint!("{e}");
            println!(
                "result=error kind=usage msg={:?}",
                e.to_string().lines().next().unwrap_or("")
            );
            return 1;
        }
    };
    let (name, outcome) = match cli.cmd {
        Command::Generate(a) => ("generate", cmd_generate(a)),
        Command::Train(a) => ("train", cmd_train(a)),
        Command::Eval(a) => ("eval", cmd_eval(a)),
        Command::Closedloop(a) => ("closedloop", cmd_closedloop(a)),
        Command::Report(a) => ("report", cmd_report(a)),
        Command::Selftest(a) => ("selftest", cmd_selftest(a)),
    };
    match outcome {
        Ok(()) => {
            println!("result=ok cmd={name}");
            0
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            println!("result=error kind=usage cmd={name} msg={msg:?}");
            1
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            println!("result=error kind=numerical cmd={name} msg={msg:?}");
            2
        }
    }
}

// ── Config file merging ────────────────────────────────────────────────

struct Config {
    values: HashMap<String, String>,
}

impl Config {
    fn load(path: Option<&Path>) -> CliResult<Config> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| io_usage(path, e))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!(
                        "{} line {}: expected `key = value`",
                        path.display(),
                        i + 1
                    ))
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Config { values })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config key `{key}`: bad value `{raw}`"))),
        }
    }
}

/// flag > config file > default.
fn pick<T: std::str::FromStr + Clone>(
    flag: Option<T>,
    cfg: &Config,
    key: &str,
    default: T,
) -> CliResult<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(cfg.get::<T>(key)?.unwrap_or(default)),
    }
}

fn pick_path(flag: Option<PathBuf>, cfg: &Config, key: &str) -> Option<PathBuf> {
    flag.or_else(|| cfg.values.get(key).map(PathBuf::from))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_usage(dir, e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_usage(path, e))
}

/// Every subcommand drops a `run.json` echoing its effective settings so
/// any output directory is self-describing.
fn write_run_echo(dir: &Path, cmd: &str, seed: u64, settings: &[(&str, String)]) -> CliResult<()> {
    let mut body = format!("{{\n  \"cmd\": \"{cmd}\",\n  \"seed\": {seed}");
    for (k, v) in settings {
        body.push_str(&format!(",\n  \"{k}\": \"{v}\""));
    }
    body.push_str("\n}\n");
    write_file(&dir.join("run.json"), &body)
}

fn load_feeder(path: Option<&Path>) -> CliResult<FeederSpec> {
    match path {
        None => Ok(FeederSpec::default_feeder()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_usage(p, e))?;
            Ok(FeederSpec::parse(&text)?)
        }
    }
}

fn parse_arch(s: &str) -> CliResult<(Category, CellKind)> {
    let (cat, cell) = s
        .split_once('-')
        .ok_or_else(|| CliError::Usage(format!("bad --model `{s}`; expected CATEGORY-CELL")))?;
    let category =
        Category::parse(cat).ok_or_else(|| CliError::Usage(format!("unknown category `{cat}`")))?;
    let cell =
        CellKind::parse(cell).ok_or_else(|| CliError::Usage(format!("unknown cell kind `{cell}`")))?;
    Ok((category, cell))
}

// ── Subcommands ────────────────────────────────────────────────────────

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let cfg = Config::load(a.common.config.as_deref())?;
    let seed = pick(a.common.seed, &cfg, "seed", 42u64)?;
    let out = pick(a.common.out.clone(), &cfg, "out", PathBuf::from("runs/data"))?;
    let scenarios = pick(a.scenarios, &cfg, "scenarios", 26usize)?;
    let steps = pick(a.steps, &cfg, "steps", 155usize)?;
    let t = pick(a.t, &cfg, "t", 2usize)?;
    let split = pick(a.split, &cfg, "split", "example".to_string())?;
    let split_mode = match split.as_str() {
        "example" => SplitMode::Example,
        "trajectory" => SplitMode::Trajectory,
        other => return Err(CliError::Usage(format!("bad --split `{other}`"))),
    };
    let feeder_path = pick_path(a.feeder, &cfg, "feeder");
    let feeder = load_feeder(feeder_path.as_deref())?;

    ensure_dir(&out)?;
    let trajs = generate_scenarios(&feeder, scenarios, steps, seed)?;
    save_trajectories(&trajs, feeder.n_buses(), &out.join("trajectories.csv"))?;

    let examples = assemble_all(&trajs, t)?;
    let n_examples = examples.len();
    let mut dataset = split_dataset(
        examples,
        derive_seed(seed, 0xDA7A),
        feeder.delta_max(),
        split_mode,
    )?;
    dataset.normalize_features();
    dataset.save(&out.join("dataset.csv"))?;
    write_file(&out.join("feeder.txt"), &feeder.to_config_string())?;
    write_run_echo(
        &out,
        "generate",
        seed,
        &[
            ("scenarios", scenarios.to_string()),
            ("steps", steps.to_string()),
            ("t", t.to_string()),
            ("split", split),
            ("examples", n_examples.to_string()),
        ],
    )?;
    println!(
        "generated {} scenarios x {} steps -> {} examples (train {} / dev {} / test {})",
        scenarios,
        steps,
        n_examples,
        dataset.split.train.len(),
        dataset.split.dev.len(),
        dataset.split.test.len()
    );
    Ok(())
}

/// Deterministic metrics fields only; wall times go to timings.csv.
fn metrics_csv(rows: &[Metrics]) -> String {
    let mut s = String::from("repeat,test_mse,accuracy,epochs,best_dev_loss\n");
    for (i, m) in rows.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            fmt_f64(m.test_mse),
            fmt_f64(m.accuracy),
            m.epochs,
            fmt_f64(m.best_dev_loss)
        ));
    }
    s
}

fn timings_csv(rows: &[Metrics]) -> String {
    let mut s = String::from("repeat,train_seconds,eval_seconds\n");
    for (i, m) in rows.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{}\n",
            i,
            fmt_f64(m.train_seconds),
            fmt_f64(m.eval_seconds)
        ));
    }
    s
}

fn curve_csv(rows: &[Metrics]) -> String {
    let mut s = String::from("repeat,epoch,dev_loss\n");
    for (i, m) in rows.iter().enumerate() {
        for (e, v) in m.dev_trace.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", i, e + 1, fmt_f64(*v)));
        }
    }
    s
}

/// Plain-data result of one training repeat; safe to hand across worker
/// threads (the model graph itself is thread-local).
struct TrainedParams {
    spec: ModelSpec,
    values: Vec<Vec<f64>>,
    norm: Option<crate::dataset::FeatureNorm>,
}

impl TrainedParams {
    fn from_model(model: &Model) -> TrainedParams {
        TrainedParams {
            spec: model.spec,
            values: model.parameters().iter().map(|p| p.to_vec()).collect(),
            norm: model.norm.clone(),
        }
    }

    fn rebuild(&self) -> Result<Model, TrainError> {
        let mut model = build_model(&self.spec)?;
        for (p, vals) in model.parameters().iter().zip(self.values.iter()) {
            p.set_values(vals);
        }
        model.norm = self.norm.clone();
        Ok(model)
    }
}

/// One repeat: build, train, evaluate. Used serially or from workers.
fn run_one_repeat(
    spec: ModelSpec,
    data: &Dataset,
    cfg: TrainConfig,
    repeat: usize,
) -> Result<(TrainedParams, Metrics), TrainError> {
    let mut run_spec = spec;
    run_spec.seed = derive_seed(spec.seed, 0x1000 + repeat as u64);
    let mut run_cfg = cfg;
    run_cfg.seed = derive_seed(cfg.seed, 0x2000 + repeat as u64);
    let mut model = build_model(&run_spec)?;
    let report = train(&mut model, data, &run_cfg)?;
    let metrics = evaluate_metrics(&model, data, &report)?;
    Ok((TrainedParams::from_model(&model), metrics))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = Config::load(a.common.config.as_deref())?;
    let seed = pick(a.common.seed, &cfg, "seed", 42u64)?;
    let out = pick(
        a.common.out.clone(),
        &cfg,
        "out",
        PathBuf::from("runs/models"),
    )?;
    let dataset_path = pick_path(a.dataset, &cfg, "dataset")
        .ok_or_else(|| CliError::Usage("train requires --dataset".into()))?;
    let arch = pick(a.model, &cfg, "model", "AM_simple-lstm".to_string())?;
    let (category, cell) = parse_arch(&arch)?;

    let data = Dataset::load(&dataset_path)?;
    let mut spec = ModelSpec::new(category, cell, data.d_x);
    spec.t = data.t;
    spec.delta_max = data.delta_max;
    spec.seed = seed;
    spec.hidden = pick(a.hidden, &cfg, "hidden", spec.hidden)?;
    spec.d_k = pick(a.dk, &cfg, "dk", spec.d_k)?;
    spec.heads = pick(a.heads, &cfg, "heads", spec.heads)?;
    spec.recurrent_layers = pick(a.recurrent_layers, &cfg, "recurrent_layers", 1)?;

    let train_cfg = TrainConfig {
        learning_rate: pick(a.lr, &cfg, "lr", 0.01)?,
        early_stop_patience: pick(a.patience, &cfg, "patience", 20)?,
        max_epochs: pick(a.epochs, &cfg, "epochs", 500)?,
        batch_size: pick(a.batch, &cfg, "batch", 64)?,
        seed,
        repeats: pick(a.repeats, &cfg, "repeats", 2)?,
        ..TrainConfig::default()
    };
    let workers = pick(a.workers, &cfg, "workers", 1usize)?.max(1);

    let mut runs: Vec<(TrainedParams, Metrics)> = Vec::with_capacity(train_cfg.repeats);
    if workers <= 1 || train_cfg.repeats <= 1 {
        for r in 0..train_cfg.repeats {
            runs.push(run_one_repeat(spec, &data, train_cfg, r)?);
        }
    } else {
        // Each worker trains whole repeats; per-repeat seeds make the
        // result independent of the fan-out.
        let results: Vec<Result<(TrainedParams, Metrics), TrainError>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for r in 0..train_cfg.repeats {
                    let data_ref = &data;
                    handles.push(scope.spawn(move || run_one_repeat(spec, data_ref, train_cfg, r)));
                }
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panic"))
                    .collect()
            });
        for res in results {
            runs.push(res?);
        }
    }

    let all: Vec<Metrics> = runs.iter().map(|(_, m)| m.clone()).collect();
    let best_idx = (0..runs.len())
        .min_by(|x, y| {
            runs[*x]
                .1
                .test_mse
                .partial_cmp(&runs[*y].1.test_mse)
                .expect("finite mse")
        })
        .expect("at least one repeat");

    let best_model = runs[best_idx].0.rebuild()?;
    let arch_dir = out.join(best_model.spec.arch_name());
    ensure_dir(&arch_dir)?;
    best_model.save_checkpoint(&arch_dir.join("checkpoint.txt"))?;
    write_file(&arch_dir.join("metrics.csv"), &metrics_csv(&all))?;
    write_file(&arch_dir.join("timings.csv"), &timings_csv(&all))?;
    write_file(&arch_dir.join("curve.csv"), &curve_csv(&all))?;
    write_run_echo(
        &arch_dir,
        "train",
        seed,
        &[
            ("dataset", dataset_path.display().to_string()),
            ("model", arch.clone()),
            ("hidden", spec.hidden.to_string()),
            ("dk", spec.d_k.to_string()),
            ("heads", spec.heads.to_string()),
            ("epochs", train_cfg.max_epochs.to_string()),
            ("lr", train_cfg.learning_rate.to_string()),
            ("patience", train_cfg.early_stop_patience.to_string()),
            ("repeats", train_cfg.repeats.to_string()),
            ("workers", workers.to_string()),
        ],
    )?;
    let avg_mse = all.iter().map(|m| m.test_mse).sum::<f64>() / all.len() as f64;
    let avg_acc = all.iter().map(|m| m.accuracy).sum::<f64>() / all.len() as f64;
    println!(
        "trained {} x{} repeats: averaged test mse {:.6}, accuracy {:.1}%",
        arch,
        all.len(),
        avg_mse,
        100.0 * avg_acc
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let cfg = Config::load(a.common.config.as_deref())?;
    let out = pick(a.common.out.clone(), &cfg, "out", PathBuf::from("runs/eval"))?;
    let dataset_path = pick_path(a.dataset, &cfg, "dataset")
        .ok_or_else(|| CliError::Usage("eval requires --dataset".into()))?;
    let ckpt_path = pick_path(a.checkpoint, &cfg, "checkpoint")
        .ok_or_else(|| CliError::Usage("eval requires --checkpoint".into()))?;

    let data = Dataset::load(&dataset_path)?;
    let model = Model::load_checkpoint(&ckpt_path)?;
    let stub = crate::trainer::TrainReport {
        epochs: 0,
        best_dev_loss: f64::INFINITY,
        dev_trace: Vec::new(),
        train_seconds: 0.0,
        final_lr: 0.0,
    };
    let metrics = evaluate_metrics(&model, &data, &stub)?;
    ensure_dir(&out)?;
    write_file(
        &out.join("eval.csv"),
        &format!(
            "model,test_mse,accuracy,eval_seconds\n{},{},{},{}\n",
            model.spec.arch_name(),
            fmt_f64(metrics.test_mse),
            fmt_f64(metrics.accuracy),
            fmt_f64(metrics.eval_seconds)
        ),
    )?;
    write_run_echo(
        &out,
        "eval",
        model.spec.seed,
        &[
            ("dataset", dataset_path.display().to_string()),
            ("checkpoint", ckpt_path.display().to_string()),
        ],
    )?;
    println!(
        "eval {}: test mse {:.6}, accuracy {:.1}%",
        model.spec.arch_name(),
        metrics.test_mse,
        100.0 * metrics.accuracy
    );
    Ok(())
}

fn cmd_closedloop(a: ClosedloopArgs) -> CliResult<()> {
    let cfg = Config::load(a.common.config.as_deref())?;
    let seed = pick(a.common.seed, &cfg, "seed", 42u64)?;
    let out = pick(
        a.common.out.clone(),
        &cfg,
        "out",
        PathBuf::from("runs/closedloop"),
    )?;
    let ckpt_path = pick_path(a.checkpoint, &cfg, "checkpoint")
        .ok_or_else(|| CliError::Usage("closedloop requires --checkpoint".into()))?;
    let traj_path = pick_path(a.trajectories, &cfg, "trajectories")
        .ok_or_else(|| CliError::Usage("closedloop requires --trajectories".into()))?;
    let horizon = pick(a.horizon, &cfg, "horizon", 50usize)?;
    let feeder_path = pick_path(a.feeder, &cfg, "feeder");
    let feeder = load_feeder(feeder_path.as_deref())?;

    let model = Model::load_checkpoint(&ckpt_path)?;
    let trajs = load_trajectories(&traj_path)?;
    let policy = BestLoggedPolicy::from_trajectories(&trajs)?;
    // Smooth (noise-free) diurnal conditions for the comparison runs.
    use rand::SeedableRng as _;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let profile = diurnal_profile(horizon, 0.0, &mut rng);

    ensure_dir(&out)?;
    let model_name = model.spec.arch_name();
    let mut bases = Vec::new();
    for base in default_base_models() {
        let baseline = run_closed_loop(
            &ConstantController(base.initial),
            &base,
            &feeder,
            &policy,
            &profile,
        )?;
        let mpc_outcome = match run_closed_loop(&model, &base, &feeder, &policy, &profile) {
            Ok(run) => {
                let mut csv = String::from(
                    "step,load_scale,irradiance,baseline_efficiency,mpc_efficiency,tap,cap,delta\n",
                );
                for (i, cond) in profile.iter().enumerate() {
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        i,
                        fmt_f64(cond.load_scale),
                        fmt_f64(cond.irradiance),
                        fmt_f64(baseline.efficiencies[i]),
                        fmt_f64(run.efficiencies[i]),
                        fmt_f64(run.controls[i].tap),
                        u8::from(run.controls[i].cap_on),
                        fmt_f64(run.controls[i].delta)
                    ));
                }
                write_file(
                    &out.join(format!("closedloop_{}_base{}.csv", model_name, base.index)),
                    &csv,
                )?;
                println!(
                    "base model {}: baseline {:.4} -> mpc {:.4}",
                    base.index, baseline.mean_efficiency, run.mean_efficiency
                );
                MpcOutcome {
                    model: model_name.clone(),
                    mean_efficiency: Some(run.mean_efficiency),
                    failed_at_step: None,
                }
            }
            Err(ClosedLoopError::Step { step, source }) => {
                eprintln!("base model {} failed at step {step}: {source}", base.index);
                MpcOutcome {
                    model: model_name.clone(),
                    mean_efficiency: None,
                    failed_at_step: Some(step),
                }
            }
            Err(other) => return Err(other.into()),
        };
        bases.push(BaseModelEfficiency {
            base_index: base.index,
            baseline_mean: baseline.mean_efficiency,
            mpc: vec![mpc_outcome],
        });
    }
    let summary = serde_json::to_string_pretty(&bases)
        .map_err(|e| CliError::Usage(format!("summary serialization: {e}")))?;
    write_file(&out.join("closedloop_summary.json"), &summary)?;
    write_run_echo(
        &out,
        "closedloop",
        seed,
        &[
            ("checkpoint", ckpt_path.display().to_string()),
            ("trajectories", traj_path.display().to_string()),
            ("horizon", horizon.to_string()),
        ],
    )?;
    Ok(())
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let cfg = Config::load(a.common.config.as_deref())?;
    let seed = pick(a.common.seed, &cfg, "seed", 42u64)?;
    let runs = pick(a.runs, &cfg, "runs", PathBuf::from("runs"))?;
    let out = pick(a.common.out.clone(), &cfg, "out", runs.join("report"))?;

    // Collect per-architecture metrics from <runs>/**/metrics.csv and any
    // closed-loop summaries.
    let mut arch_results: Vec<ArchResult> = Vec::new();
    let mut bases: Vec<BaseModelEfficiency> = Vec::new();
    let mut stack = vec![runs.clone()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| io_usage(&dir, e))?;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()) == Some("metrics.csv") {
                let name = dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("model")
                    .to_string();
                let rows = read_metrics_csv(&path)?;
                if rows.is_empty() {
                    continue;
                }
                let timings = read_timings_csv(&dir.join("timings.csv")).unwrap_or_default();
                let k = rows.len() as f64;
                let tk = (timings.len() as f64).max(1.0);
                arch_results.push(ArchResult {
                    name,
                    loss: rows.iter().map(|r| r.0).sum::<f64>() / k,
                    accuracy: rows.iter().map(|r| r.1).sum::<f64>() / k,
                    train_seconds: timings.iter().map(|r| r.0).sum::<f64>() / tk,
                    eval_seconds: timings.iter().map(|r| r.1).sum::<f64>() / tk,
                });
            } else if path.file_name().and_then(|n| n.to_str()) == Some("closedloop_summary.json")
            {
                let text = std::fs::read_to_string(&path).map_err(|e| io_usage(&path, e))?;
                let mut parsed: Vec<BaseModelEfficiency> = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                merge_bases(&mut bases, &mut parsed);
            }
        }
    }
    if arch_results.is_empty() {
        return Err(CliError::Usage(format!(
            "no metrics.csv files found under {}",
            runs.display()
        )));
    }
    bases.sort_by_key(|b| b.base_index);
    let report = efficiency_report(arch_results, bases, seed);
    ensure_dir(&out)?;
    write_file(&out.join("leaderboard.txt"), &report.render_text())?;
    write_file(&out.join("leaderboard.csv"), &report.leaderboard_csv())?;
    write_file(&out.join("efficiency.csv"), &report.efficiency_csv())?;
    write_file(&out.join("report.json"), &report.to_json().map_err(CliError::from)?)?;
    print!("{}", report.render_text());
    Ok(())
}

fn merge_bases(acc: &mut Vec<BaseModelEfficiency>, extra: &mut Vec<BaseModelEfficiency>) {
    for b in extra.drain(..) {
        if let Some(existing) = acc.iter_mut().find(|e| e.base_index == b.base_index) {
            existing.mpc.extend(b.mpc);
        } else {
            acc.push(b);
        }
    }
}

fn read_metrics_csv(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_usage(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            continue;
        }
        let mse: f64 = fields[1]
            .parse()
            .map_err(|_| CliError::Usage(format!("{}: bad mse field", path.display())))?;
        let acc: f64 = fields[2]
            .parse()
            .map_err(|_| CliError::Usage(format!("{}: bad accuracy field", path.display())))?;
        out.push((mse, acc));
    }
    Ok(out)
}

fn read_timings_csv(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_usage(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            continue;
        }
        out.push((
            fields[1].parse().unwrap_or(0.0),
            fields[2].parse().unwrap_or(0.0),
        ));
    }
    Ok(out)
}

// ── Selftest ───────────────────────────────────────────────────────────

/// Literal-loop attention reference used only by the selftest; kept
/// independent of the layer implementation on purpose.
#[allow(clippy::needless_range_loop)]
mod selfcheck {
    pub fn attention_loops(
        xs: &[Vec<f64>],
        wq: &[Vec<f64>],
        wk: &[Vec<f64>],
        wv: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let t = xs.len();
        let d_x = xs[0].len();
        let d_k = wq[0].len();
        let project = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
            (0..d_k)
                .map(|j| (0..d_x).map(|i| x[i] * w[i][j]).sum())
                .collect()
        };
        let q: Vec<Vec<f64>> = xs.iter().map(|x| project(wq, x)).collect();
        let k: Vec<Vec<f64>> = xs.iter().map(|x| project(wk, x)).collect();
        let v: Vec<Vec<f64>> = xs.iter().map(|x| project(wv, x)).collect();
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            let mut scores = Vec::with_capacity(t);
            for l in 0..t {
                let dot: f64 = (0..d_k).map(|d| q[i][d] * k[l][d]).sum();
                scores.push(dot / (d_k as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut a_i = vec![0.0; d_k];
            for l in 0..t {
                let w = exps[l] / z;
                for d in 0..d_k {
                    a_i[d] += w * v[l][d];
                }
            }
            out.push(a_i);
        }
        out
    }
}

fn cmd_selftest(_a: SelftestArgs) -> CliResult<()> {
    use crate::autodiff::{finite_difference_check_all, Activation, Tensor};
    use crate::feeder::{
        compute_efficiency, nominal_controls, solve_power_flow, BranchKind, BranchSpec, BusSpec,
        Complex, Conditions, ControlVector,
    };
    use crate::layers::{lstm_sequence_forward, single_head_attention, AttentionParams, DenseParams, LstmParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // gradient checks over random layer instances
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = DenseParams::init(&mut rng, 4, 3, Activation::Tanh);
        let x = Tensor::leaf(&[1, 4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("leaf");
        let target = Tensor::leaf(&[1, 3], (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("leaf");
        let f = || dense.forward(&x)?.mse_loss(&target);
        let err = finite_difference_check_all(f, &dense.params(), 1e-5)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        worst = worst.max(err);

        let lstm = LstmParams::init(&mut rng, 3, 3);
        let xs: Vec<Tensor> = (0..2)
            .map(|_| {
                Tensor::leaf(&[1, 3], (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .expect("leaf")
            })
            .collect();
        let t2 = Tensor::leaf(&[1, 3], vec![0.2, -0.1, 0.4]).expect("leaf");
        let g = || lstm_sequence_forward(&lstm, &xs)?.mse_loss(&t2);
        let err = finite_difference_check_all(g, &lstm.params(), 1e-5)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        worst = worst.max(err);
    }
    check(
        "gradient-checks",
        worst <= 1e-4,
        format!("max relative error {worst:.2e} (tolerance 1e-4)"),
    );

    // attention vs literal-loop reference
    let mut worst_gap: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let t = rng.random_range(1..=4usize);
        let d_x = rng.random_range(2..=6usize);
        let d_k = rng.random_range(1..=5usize);
        let p = AttentionParams::init_single(&mut rng, d_x, d_k, t);
        let xs_raw: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..d_x).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let xs: Vec<Tensor> = xs_raw
            .iter()
            .map(|v| Tensor::leaf(&[1, d_x], v.clone()).expect("leaf"))
            .collect();
        let got =
            single_head_attention(&p, &xs).map_err(|e| CliError::Numerical(e.to_string()))?;
        let to_grid = |t: &Tensor| -> Vec<Vec<f64>> {
            let rows = t.shape()[0];
            let cols = t.shape()[1];
            let v = t.to_vec();
            (0..rows)
                .map(|r| v[r * cols..(r + 1) * cols].to_vec())
                .collect()
        };
        let expect = selfcheck::attention_loops(
            &xs_raw,
            &to_grid(&p.heads[0].wq),
            &to_grid(&p.heads[0].wk),
            &to_grid(&p.heads[0].wv),
        );
        for (a, e) in got.iter().zip(expect.iter()) {
            for (x, y) in a.to_vec().iter().zip(e.iter()) {
                worst_gap = worst_gap.max((x - y).abs());
            }
        }
    }
    check(
        "attention-oracle",
        worst_gap <= 1e-12,
        format!("max abs deviation {worst_gap:.2e} (tolerance 1e-12)"),
    );

    // power-flow: balance, two-bus fixed-point oracle, calibrated band
    let spec = FeederSpec::default_feeder();
    let sol = solve_power_flow(&spec, &nominal_controls(), Conditions::NOMINAL)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    check(
        "power-balance",
        sol.power_balance_error() <= 1e-8,
        format!(
            "balance error {:.2e} pu (tolerance 1e-8)",
            sol.power_balance_error()
        ),
    );

    let two_bus = FeederSpec {
        base_mva: 10.0,
        base_kv: 12.47,
        slack_bus: 1,
        buses: vec![
            BusSpec {
                id: 1,
                load_mw: 0.0,
                load_mvar: 0.0,
            },
            BusSpec {
                id: 2,
                load_mw: 5.0,
                load_mvar: 2.0,
            },
        ],
        branches: vec![BranchSpec {
            from: 1,
            to: 2,
            kind: BranchKind::Line {
                r_pu: 0.01,
                x_pu: 0.05,
            },
        }],
        capacitor: None,
        pv: None,
    };
    let sol2 = solve_power_flow(
        &two_bus,
        &ControlVector::new(1.0, false, 0.0),
        Conditions::NOMINAL,
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    let z = Complex::new(0.01, 0.05);
    let s = Complex::new(0.5, 0.2);
    let vs = Complex::new(1.0, 0.0);
    let mut v = vs;
    for _ in 0..200 {
        v = vs - z * (s / v).conj();
    }
    let gap = (sol2.voltages[1] - v).abs();
    check(
        "two-bus-oracle",
        gap <= 1e-8,
        format!("sweep vs fixed point gap {gap:.2e} (tolerance 1e-8)"),
    );

    let eff =
        compute_efficiency(&sol).map_err(|e| CliError::Numerical(e.to_string()))?;
    check(
        "nominal-efficiency",
        (0.90..=0.99).contains(&eff),
        format!("{:.2}% within [90%, 99%]", 100.0 * eff),
    );

    if failures > 0 {
        Err(CliError::Numerical(format!(
            "{failures} selftest checks failed"
        )))
    } else {
        Ok(())
    }
}
