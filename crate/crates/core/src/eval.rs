//! Geom-distance metric, success rule, paired experiment suites and
//! aggregation over seeds.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::control::{
    expert_demo, imitate, run_goal_directed, run_random_policy, EpisodeRecord, NearestNeighbor,
    PlanConfig, Task,
};
use crate::env::{make_goal, reset, EnvConfig, EnvMode, GoalKind, RopeState};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::seed;

/// Success threshold on the mean geom distance, in pixels.
pub const SUCCESS_THRESHOLD: f64 = 4.0;

/// Mean distance between index-aligned geoms.
pub fn aligned_error(achieved: &RopeState, target: &RopeState) -> Result<f64> {
    if achieved.len() != target.len() || achieved.is_empty() {
        return Err(Error::shape(
            "geom_error",
            format!("{} vs {} geoms", achieved.len(), target.len()),
        ));
    }
    let sum: f64 = achieved
        .geoms
        .iter()
        .zip(&target.geoms)
        .map(|(a, b)| a.dist(*b))
        .sum();
    Ok(sum / achieved.len() as f64)
}

/// Mean geom distance, minimized over the two orientations of `target`.
pub fn geom_error(achieved: &RopeState, target: &RopeState) -> Result<f64> {
    let forward = aligned_error(achieved, target)?;
    let reversed = aligned_error(achieved, &target.reversed())?;
    Ok(forward.min(reversed))
}

/// Goal task: final error below `threshold`. Imitation: trajectory-average
/// error below `threshold`.
pub fn success(record: &EpisodeRecord, threshold: f64) -> bool {
    let e = match record.task {
        Task::Goal => record.final_error,
        Task::Imitation => record.average_error,
    };
    e < threshold
}

/// Relative success-rate drop from `det` to `stoch`; zero when `det` is zero.
pub fn relative_drop(det: f64, stoch: f64) -> f64 {
    if det > 0.0 {
        (det - stoch) / det
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub env_mode: EnvMode,
    /// Goal kind tag, or `shaped` for pooled C/L/S rows.
    pub goal_kind: String,
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_geom_error: f64,
}

pub const METRIC_COLUMNS: &str =
    "method,env_mode,goal_kind,seed,episodes,successes,success_rate,mean_geom_error";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.env_mode.tag(),
            self.goal_kind,
            self.seed,
            self.episodes,
            self.successes,
            self.success_rate,
            self.mean_geom_error
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRIC_COLUMNS);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// A controller under evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Model(&'a ModelBundle),
    Random,
    NearestNeighbor(&'a NearestNeighbor),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    /// Transitions per demonstration.
    pub length: usize,
    /// Candidate actions the scripted demonstrator tries per step.
    pub expert_candidates: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            length: 10,
            expert_candidates: 64,
        }
    }
}

/// One suite cell: a task in one environment mode with one goal kind and seed.
#[derive(Clone, Copy, Debug)]
pub struct Cell {
    pub task: Task,
    pub env: EnvConfig,
    pub goal: GoalKind,
    pub seed: u64,
    pub episodes: usize,
    pub plan: PlanConfig,
    pub demo: DemoConfig,
}

/// Start and goal of episode `k` of a suite seed. Depends only on
/// `(suite_seed, k, goal kind, env geometry)`, so every method and both
/// environment modes see the same pairs.
pub fn episode_setup(
    env: &EnvConfig,
    goal: GoalKind,
    suite_seed: u64,
    k: usize,
) -> Result<(u64, RopeState, RopeState)> {
    let ep = seed::child_seed(suite_seed, "episode", k as u64);
    let start = reset(env, seed::child_seed(ep, "start", 0));
    let goal = make_goal(goal, env, &mut seed::child_rng(ep, "goal", 0))?;
    Ok((ep, start, goal))
}

pub fn run_episode(method: Method<'_>, cell: &Cell, k: usize) -> Result<EpisodeRecord> {
    let (ep, start, goal) = episode_setup(&cell.env, cell.goal, cell.seed, k)?;
    match cell.task {
        Task::Goal => {
            let plan = PlanConfig {
                seed: ep,
                ..cell.plan
            };
            match method {
                Method::Model(b) => run_goal_directed(b, &cell.env, &start, &goal, &plan),
                Method::Random => run_random_policy(&cell.env, &start, &goal, &plan),
                Method::NearestNeighbor(_) => Err(Error::Variant(
                    "the nearest-neighbour baseline only supports imitation".into(),
                )),
            }
        }
        Task::Imitation => {
            let demo = expert_demo(
                &cell.env,
                &start,
                &goal,
                cell.demo.length,
                cell.demo.expert_candidates,
                ep,
            )?;
            match method {
                Method::Model(b) => imitate(b, &cell.env, &demo, ep),
                Method::NearestNeighbor(nn) => nn.imitate(&cell.env, &demo, ep),
                Method::Random => Err(Error::Variant(
                    "the random policy only supports goal-directed planning".into(),
                )),
            }
        }
    }
}

pub fn evaluate_cell(name: &str, method: Method<'_>, cell: &Cell) -> Result<MetricRow> {
    let mut successes = 0;
    let mut err_sum = 0.0;
    for k in 0..cell.episodes {
        let rec = run_episode(method, cell, k)?;
        successes += success(&rec, SUCCESS_THRESHOLD) as usize;
        err_sum += match cell.task {
            Task::Goal => rec.final_error,
            Task::Imitation => rec.average_error,
        };
    }
    let n = cell.episodes;
    Ok(MetricRow {
        method: name.to_string(),
        env_mode: cell.env.mode,
        goal_kind: cell.goal.tag().to_string(),
        seed: cell.seed,
        episodes: n,
        successes,
        success_rate: if n == 0 {
            0.0
        } else {
            successes as f64 / n as f64
        },
        mean_geom_error: if n == 0 { 0.0 } else { err_sum / n as f64 },
    })
}

/// Merges C/L/S rows with the same method, mode and seed into one `shaped` row.
pub fn pool_shaped(rows: &[MetricRow]) -> Vec<MetricRow> {
    let shaped: Vec<&str> = GoalKind::SHAPED.iter().map(|g| g.tag()).collect();
    let mut groups: BTreeMap<(String, &'static str, u64), MetricRow> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows
        .iter()
        .filter(|r| shaped.contains(&r.goal_kind.as_str()))
    {
        let key = (r.method.clone(), r.env_mode.tag(), r.seed);
        let e = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            MetricRow {
                goal_kind: "shaped".into(),
                episodes: 0,
                successes: 0,
                mean_geom_error: 0.0,
                ..r.clone()
            }
        });
        e.mean_geom_error += r.mean_geom_error * r.episodes as f64;
        e.episodes += r.episodes;
        e.successes += r.successes;
    }
    order
        .into_iter()
        .map(|k| {
            let mut r = groups.remove(&k).expect("key recorded");
            if r.episodes > 0 {
                r.success_rate = r.successes as f64 / r.episodes as f64;
                r.mean_geom_error /= r.episodes as f64;
            }
            r
        })
        .collect()
}

/// Mean ± population standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub env_mode: EnvMode,
    pub goal_kind: String,
    pub seeds: usize,
    pub success_rate_mean: f64,
    pub success_rate_std: f64,
    pub mean_geom_error: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows by (method, mode, goal kind), in first-seen order.
pub fn summarize(rows: &[MetricRow]) -> Vec<Summary> {
    let mut keys: Vec<(String, EnvMode, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.env_mode, r.goal_kind.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, env_mode, goal_kind)| {
            let group: Vec<&MetricRow> = rows
                .iter()
                .filter(|r| {
                    r.method == method && r.env_mode == env_mode && r.goal_kind == goal_kind
                })
                .collect();
            let rates: Vec<f64> = group.iter().map(|r| r.success_rate).collect();
            let errs: Vec<f64> = group.iter().map(|r| r.mean_geom_error).collect();
            let (m, s) = mean_std(&rates);
            Summary {
                method,
                env_mode,
                goal_kind,
                seeds: group.len(),
                success_rate_mean: m,
                success_rate_std: s,
                mean_geom_error: mean_std(&errs).0,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// A trained checkpoint (any variant or the regression baseline).
    Model,
    Random,
    NearestNeighbor,
}

/// A method entry of a suite file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub kind: MethodKind,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose training split backs the nearest-neighbour baseline.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Restricts the entry to these modes; all modes when absent.
    #[serde(default)]
    pub env_modes: Option<Vec<EnvMode>>,
}

impl MethodSpec {
    pub fn applies_to(&self, mode: EnvMode) -> bool {
        self.env_modes.as_ref().is_none_or(|m| m.contains(&mode))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub task: Task,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_modes")]
    pub env_modes: Vec<EnvMode>,
    #[serde(default = "default_goals")]
    pub goal_kinds: Vec<GoalKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub demo: DemoConfig,
}

fn default_modes() -> Vec<EnvMode> {
    vec![EnvMode::Deterministic, EnvMode::Stochastic]
}

fn default_goals() -> Vec<GoalKind> {
    vec![GoalKind::Straight, GoalKind::C, GoalKind::L, GoalKind::S]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_episodes() -> usize {
    50
}

impl SuiteConfig {
    /// Every file referenced by a method must exist.
    pub fn check_paths(&self) -> Result<()> {
        for m in &self.methods {
            for p in [&m.checkpoint, &m.dataset].into_iter().flatten() {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
            match m.kind {
                MethodKind::Model if m.checkpoint.is_none() => {
                    return Err(Error::Config(format!(
                        "method {} needs a checkpoint",
                        m.name
                    )))
                }
                MethodKind::NearestNeighbor if m.dataset.is_none() => {
                    return Err(Error::Config(format!("method {} needs a dataset", m.name)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Runs every (method, mode, goal kind, seed) cell of `suite`. Checkpoints
/// and datasets are loaded from the paths in each method spec.
pub fn evaluate_suite(
    suite: &SuiteConfig,
    env: &EnvConfig,
    plan: &PlanConfig,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<Vec<MetricRow>> {
    suite.check_paths()?;
    let mut rows = Vec::new();
    for spec in &suite.methods {
        let bundle = match &spec.checkpoint {
            Some(p) if spec.kind == MethodKind::Model => {
                Some(crate::persist::load_checkpoint(p)?.bundle)
            }
            _ => None,
        };
        let nn = match &spec.dataset {
            Some(p) if spec.kind == MethodKind::NearestNeighbor => {
                let d = crate::persist::load_dataset(p)?;
                Some(NearestNeighbor::new(d.train(), d.env.image_size)?)
            }
            _ => None,
        };
        let method = match spec.kind {
            MethodKind::Model => Method::Model(bundle.as_ref().expect("checked")),
            MethodKind::Random => Method::Random,
            MethodKind::NearestNeighbor => Method::NearestNeighbor(nn.as_ref().expect("checked")),
        };
        for &mode in suite.env_modes.iter().filter(|&&m| spec.applies_to(m)) {
            for &goal in &suite.goal_kinds {
                for &s in &suite.seeds {
                    let cell = Cell {
                        task: suite.task,
                        env: env.with_mode(mode),
                        goal,
                        seed: s,
                        episodes: suite.episodes,
                        plan: *plan,
                        demo: suite.demo,
                    };
                    let row = evaluate_cell(&spec.name, method, &cell)?;
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::StepRecord;
    use crate::env::{Action, Point};
    use proptest::prelude::*;

    fn chain(offset: (f64, f64)) -> RopeState {
        RopeState::new(
            (0..25)
                .map(|i| Point::new(8.0 + 2.0 * i as f64 + offset.0, 30.0 + offset.1))
                .collect(),
        )
    }

    #[test]
    fn geom_error_examples() {
        let a = chain((0.0, 0.0));
        assert_eq!(geom_error(&a, &a).unwrap(), 0.0);
        assert!((geom_error(&chain((3.0, 4.0)), &a).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(geom_error(&a.reversed(), &a).unwrap(), 0.0);
        let short = RopeState::new(a.geoms[..3].to_vec());
        assert!(geom_error(&short, &a).is_err());
    }

    fn record(task: Task, errors: &[f64]) -> EpisodeRecord {
        let s = chain((0.0, 0.0));
        let steps = errors
            .iter()
            .map(|&e| StepRecord {
                state: s.clone(),
                action: Action::new(0.0, 0.0, 0.0, 0.0),
                next_state: s.clone(),
                error: e,
            })
            .collect::<Vec<_>>();
        let final_error = *errors.last().unwrap();
        let average_error = errors.iter().sum::<f64>() / errors.len() as f64;
        EpisodeRecord {
            task,
            steps,
            final_error,
            average_error,
        }
    }

    #[test]
    fn success_rule() {
        assert!(success(&record(Task::Goal, &[9.0, 0.0]), 4.0));
        assert!(!success(&record(Task::Goal, &[4.0]), 4.0));
        assert!(!success(&record(Task::Imitation, &[2.0, 3.0, 10.0]), 4.0));
        assert!(success(&record(Task::Imitation, &[2.0, 3.0, 6.0]), 4.0));
    }

    #[test]
    fn pooling_and_summaries() {
        let row = |g: &str, seed, successes| MetricRow {
            method: "fi".into(),
            env_mode: EnvMode::Deterministic,
            goal_kind: g.into(),
            seed,
            episodes: 10,
            successes,
            success_rate: successes as f64 / 10.0,
            mean_geom_error: 1.0 + successes as f64,
        };
        let rows = vec![
            row("straight", 0, 10),
            row("c", 0, 2),
            row("l", 0, 4),
            row("s", 0, 6),
            row("c", 1, 0),
            row("l", 1, 0),
            row("s", 1, 3),
        ];
        let pooled = pool_shaped(&rows);
        assert_eq!(pooled.len(), 2);
        assert_eq!((pooled[0].episodes, pooled[0].successes), (30, 12));
        assert!((pooled[0].success_rate - 0.4).abs() < 1e-15);
        assert!((pooled[0].mean_geom_error - 5.0).abs() < 1e-12);
        let sum = summarize(&pooled);
        assert_eq!(sum.len(), 1);
        assert!((sum[0].success_rate_mean - 0.25).abs() < 1e-12);
        assert!((sum[0].success_rate_std - 0.15).abs() < 1e-12);
        let straight = summarize(&rows[..1]);
        assert_eq!(
            (straight[0].success_rate_mean, straight[0].success_rate_std),
            (1.0, 0.0)
        );
    }

    #[test]
    fn relative_drop_handles_zero_baseline() {
        assert_eq!(relative_drop(0.0, 0.0), 0.0);
        assert!((relative_drop(0.5, 0.4) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn random_method_registered_twice_gives_identical_rows() {
        let cell = Cell {
            task: Task::Goal,
            env: EnvConfig::default(),
            goal: GoalKind::Straight,
            seed: 3,
            episodes: 3,
            plan: PlanConfig {
                horizon: 4,
                ..PlanConfig::default()
            },
            demo: DemoConfig::default(),
        };
        let a = evaluate_cell("random", Method::Random, &cell).unwrap();
        let b = evaluate_cell("random", Method::Random, &cell).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.success_rate, a.successes as f64 / 3.0);
    }

    #[test]
    fn episode_pairs_do_not_depend_on_env_mode() {
        let det = EnvConfig::default();
        let sto = det.with_mode(EnvMode::Stochastic);
        for k in 0..5 {
            assert_eq!(
                episode_setup(&det, GoalKind::C, 1, k).unwrap(),
                episode_setup(&sto, GoalKind::C, 1, k).unwrap()
            );
        }
    }

    fn state() -> impl Strategy<Value = RopeState> {
        prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 25)
            .prop_map(|v| RopeState::new(v.into_iter().map(|(x, y)| Point::new(x, y)).collect()))
    }

    proptest! {
        #[test]
        fn aligned_error_is_a_pseudometric(a in state(), b in state(), c in state()) {
            let ab = aligned_error(&a, &b).unwrap();
            prop_assert!((ab - aligned_error(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert_eq!(aligned_error(&a, &a).unwrap(), 0.0);
            prop_assert!(ab <= aligned_error(&a, &c).unwrap() + aligned_error(&c, &b).unwrap() + 1e-9);
            prop_assert!(geom_error(&a, &b).unwrap() <= ab);
        }

        #[test]
        fn lowering_errors_never_breaks_success(errs in prop::collection::vec(0.0f64..10.0, 1..8), f in 0.0f64..1.0) {
            let lower: Vec<f64> = errs.iter().map(|e| e * f).collect();
            for task in [Task::Goal, Task::Imitation] {
                if success(&record(task, &errs), 4.0) {
                    prop_assert!(success(&record(task, &lower), 4.0));
                }
            }
        }
    }
}
