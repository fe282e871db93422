//! The `cdyn` command line.
//!
//! Every subcommand starts from an experiment config (`--config`, or the
//! defaults) and applies its flag overrides on top. Failures print one line
//! `error[<kind>]: <message>` to stderr; configuration and usage problems exit
//! with 2, everything else with 1.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::control::{EpisodeRecord, Task};
use crate::env::{render, EnvMode, GoalKind, ObsKind};
use crate::error::{Error, Result};
use crate::eval::{run_episode, success, Cell, Method, MetricRow, SUCCESS_THRESHOLD};
use crate::gradcheck::{gradcheck, GradCheckConfig};
use crate::models::Variant;
use crate::persist::{self, Checkpoint, ExperimentConfig};
use crate::train::{collect_dataset, train_with, Denominator, Objective};

#[derive(Parser, Debug)]
#[command(
    name = "cdyn",
    version,
    about = "Contrastive forward/inverse dynamics on a 2D rope"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect random-exploration trajectories into a dataset file.
    Collect(CollectArgs),
    /// Train a model on a dataset; writes a checkpoint and a loss curve.
    Train(TrainArgs),
    /// Goal-directed planning episodes with a trained model.
    Plan(EpisodeArgs),
    /// Imitation of scripted demonstrations with a trained model.
    Imitate(EpisodeArgs),
    /// Run the evaluation suite of the config; writes metrics CSV and JSON.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable composite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnvArg {
    Det,
    Stoch,
}

impl From<EnvArg> for EnvMode {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::Det => EnvMode::Deterministic,
            EnvArg::Stoch => EnvMode::Stochastic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    F,
    I,
    Fi,
    Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DenominatorArg {
    Negatives,
    #[value(name = "with_positive")]
    WithPositive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GoalArg {
    Straight,
    C,
    L,
    S,
}

impl From<GoalArg> for GoalKind {
    fn from(g: GoalArg) -> Self {
        match g {
            GoalArg::Straight => GoalKind::Straight,
            GoalArg::C => GoalKind::C,
            GoalArg::L => GoalKind::L,
            GoalArg::S => GoalKind::S,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObsArg {
    Coords,
    Raster,
}

#[derive(Args, Debug)]
struct CollectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    /// Dataset file; defaults to `<out_dir>/dataset.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file; defaults to `<out_dir>/dataset.txt`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    denominator: Option<DenominatorArg>,
    #[arg(long, value_enum)]
    obs: Option<ObsArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "straight")]
    goal: GoalArg,
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every visited state as a PGM frame.
    #[arg(long)]
    frames: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the suite's episodes per cell.
    #[arg(long)]
    episodes: Option<usize>,
    /// Restricts the suite to one environment mode.
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    /// Restricts the suite to one goal kind.
    #[arg(long, value_enum)]
    goal: Option<GoalArg>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    points: usize,
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::UnsupportedGoal(_)
        | Error::Variant(_)
        | Error::MissingFile(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(flag: &Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = flag.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Collect(a) => collect(a),
        Command::Train(a) => train(a),
        Command::Plan(a) => episodes(a, Task::Goal),
        Command::Imitate(a) => episodes(a, Task::Imitation),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => {
            let cfg = GradCheckConfig {
                seed: a.seed,
                points: a.points,
                ..GradCheckConfig::default()
            };
            let report = gradcheck(&cfg)?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { 1 })
        }
    }
}

fn collect(a: CollectArgs) -> Result<i32> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.trajectories {
        cfg.collect.trajectories = t;
    }
    if let Some(l) = a.length {
        cfg.collect.length = l;
    }
    if let Some(e) = a.env {
        cfg.env.mode = e.into();
    }
    if cfg.collect.length == 0 {
        return Err(Error::Config("length must be >= 1".into()));
    }
    let path = match a.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            p
        }
        None => out_dir(&None, &cfg)?.join("dataset.txt"),
    };
    let d = collect_dataset(
        &cfg.env,
        cfg.collect.trajectories,
        cfg.collect.length,
        cfg.seed,
    );
    persist::save_dataset(&path, &d)?;
    println!("wrote {} transitions to {}", d.len(), path.display());
    Ok(0)
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut cfg = load_config(&a.common)?;
    let t = &mut cfg.train;
    if let Some(s) = a.common.seed {
        t.seed = s;
    }
    match a.variant {
        Some(VariantArg::F) => t.variant = Variant::F,
        Some(VariantArg::I) => t.variant = Variant::I,
        Some(VariantArg::Fi) => t.variant = Variant::FI,
        Some(VariantArg::Baseline) => {
            t.variant = Variant::FI;
            t.objective = Objective::Regression;
        }
        None => {}
    }
    match a.denominator {
        Some(DenominatorArg::Negatives) => t.denominator = Denominator::Negatives,
        Some(DenominatorArg::WithPositive) => t.denominator = Denominator::WithPositive,
        None => {}
    }
    match a.obs {
        Some(ObsArg::Coords) => t.obs_kind = ObsKind::Coords,
        Some(ObsArg::Raster) => t.obs_kind = ObsKind::Raster,
        None => {}
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    let tc = cfg.train;
    let dataset_path = a
        .dataset
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("dataset.txt"));
    let dataset = persist::load_dataset(&dataset_path)?;
    let dir = out_dir(&a.out, &cfg)?;
    let tag = tc.method_tag();
    let outcome = train_with(&dataset, &tc, |e| {
        println!("epoch {} total {:.6}", e.epoch, e.total);
    })?;
    let ckpt = dir.join(format!("model-{tag}.ckpt"));
    let curve = dir.join(format!("loss-{tag}.csv"));
    persist::save_checkpoint(
        &ckpt,
        &Checkpoint {
            bundle: outcome.bundle,
            train: Some(tc),
            seed: tc.seed,
        },
    )?;
    persist::write_text(&curve, &persist::loss_curve_csv(&outcome.curve))?;
    println!("wrote {} and {}", ckpt.display(), curve.display());
    Ok(0)
}

#[derive(Serialize)]
struct EpisodeFile<'a> {
    goal_kind: &'a str,
    env_mode: &'a str,
    seed: u64,
    index: usize,
    success: bool,
    record: &'a EpisodeRecord,
}

fn write_frames(dir: &Path, record: &EpisodeRecord, image_size: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, s) in record.states().iter().enumerate() {
        let obs = render(s, ObsKind::Raster, image_size);
        persist::write_pgm(&dir.join(format!("t{t:03}.pgm")), &obs.values, image_size)?;
    }
    Ok(())
}

fn episodes(a: EpisodeArgs, task: Task) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let ck = persist::load_checkpoint(&a.checkpoint)?;
    match task {
        Task::Goal => ck.bundle.require_forward()?,
        Task::Imitation => ck.bundle.require_inverse()?,
    }
    let mut env = cfg.env;
    if let Some(e) = a.env {
        env.mode = e.into();
    }
    let demo = cfg.suite.as_ref().map(|s| s.demo).unwrap_or_default();
    let cell = Cell {
        task,
        env,
        goal: a.goal.into(),
        seed: a.common.seed.unwrap_or(cfg.seed),
        episodes: a.episodes,
        plan: cfg.plan,
        demo,
    };
    let dir = out_dir(&a.out, &cfg)?;
    let label = match task {
        Task::Goal => "plan",
        Task::Imitation => "imitate",
    };
    let mut lines = String::new();
    let mut successes = 0;
    for k in 0..cell.episodes {
        let rec = run_episode(Method::Model(&ck.bundle), &cell, k)?;
        let ok = success(&rec, SUCCESS_THRESHOLD);
        successes += ok as usize;
        let entry = EpisodeFile {
            goal_kind: cell.goal.tag(),
            env_mode: env.mode.tag(),
            seed: cell.seed,
            index: k,
            success: ok,
            record: &rec,
        };
        lines.push_str(&serde_json::to_string(&entry)?);
        lines.push('\n');
        if a.frames {
            write_frames(
                &dir.join(format!("{label}-frames/ep{k:03}")),
                &rec,
                env.image_size,
            )?;
        }
    }
    let path = dir.join(format!("{label}-episodes.jsonl"));
    persist::write_text(&path, &lines)?;
    println!(
        "{successes}/{} episodes succeeded; records in {}",
        cell.episodes,
        path.display()
    );
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let mut suite = cfg
        .suite
        .clone()
        .ok_or_else(|| Error::Config("eval needs a [suite] section in the config".into()))?;
    if let Some(n) = a.episodes {
        suite.episodes = n;
    }
    if let Some(s) = a.common.seed {
        suite.seeds = vec![s];
    }
    if let Some(e) = a.env {
        suite.env_modes = vec![e.into()];
    }
    if let Some(g) = a.goal {
        suite.goal_kinds = vec![g.into()];
    }
    let dir = out_dir(&a.out, &cfg)?;
    let mut stdout = std::io::stdout();
    let rows = crate::eval::evaluate_suite(&suite, &cfg.env, &cfg.plan, |r: &MetricRow| {
        let _ = writeln!(stdout, "{}", r.csv_line());
    })?;
    let (csv, json) = persist::save_metrics(&dir, &rows)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(0)
}
