//! Sampling MPC toward a goal, imitation from observation with the inverse
//! model, and the pixel-space nearest-neighbour baseline.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_sim, Graph, Tensor};
use crate::env::{
    render, sample_action, step, Action, EnvConfig, EnvMode, ObsKind, Observation, RopeState,
};
use crate::error::{Error, Result};
use crate::eval::geom_error;
use crate::models::{
    decode_action, encode_state, encode_state_batch, inverse_predict, normalized_actions,
    ModelBundle, Variant,
};
use crate::seed::{self, Rng};
use crate::train::Transition;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub horizon: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            candidates: 256,
            seed: 0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.candidates == 0 {
            return Err(Error::Config("horizon and candidates must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Goal,
    Imitation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: RopeState,
    pub action: Action,
    pub next_state: RopeState,
    /// Geom error of `next_state` against this step's target.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: Task,
    pub steps: Vec<StepRecord>,
    pub final_error: f64,
    /// Mean of the per-step errors.
    pub average_error: f64,
}

impl EpisodeRecord {
    fn new(task: Task, steps: Vec<StepRecord>) -> Self {
        let final_error = steps.last().map_or(0.0, |s| s.error);
        let average_error = if steps.is_empty() {
            0.0
        } else {
            steps.iter().map(|s| s.error).sum::<f64>() / steps.len() as f64
        };
        Self {
            task,
            steps,
            final_error,
            average_error,
        }
    }

    /// Start state followed by every post-action state.
    pub fn states(&self) -> Vec<RopeState> {
        let mut out: Vec<RopeState> = self
            .steps
            .first()
            .map(|s| s.state.clone())
            .into_iter()
            .collect();
        out.extend(self.steps.iter().map(|s| s.next_state.clone()));
        out
    }
}

/// Result of scoring the sampled candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanChoice {
    pub action: Action,
    pub index: usize,
    pub scores: Vec<f64>,
}

/// `cos(F(h, q(a_k)), h_goal)` for every candidate `a_k`.
pub fn score_candidates(
    bundle: &ModelBundle,
    h: &[f64],
    goal_embedding: &[f64],
    candidates: &[Action],
) -> Result<Vec<f64>> {
    bundle.require_forward()?;
    let m = candidates.len();
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, false);
    let hs = g.constant(Tensor::from_rows(&vec![h; m])?);
    let acts = g.constant(normalized_actions(candidates, bundle.arch.image_size)?);
    let z = if bundle.variant == Variant::F {
        acts
    } else {
        bound.encode_actions(&mut g, acts)?
    };
    let pred = bound.predict_forward(&mut g, hs, z)?;
    let goal = g.constant(Tensor::row(goal_embedding));
    let sim = g.cosine_sim(pred, goal)?;
    Ok(g.forward_eval(sim, &[])?.into_data())
}

/// Index of the maximum; ties go to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// One MPC step: sample candidates from the exploration distribution around
/// `state`, score them with the forward model, return the best.
pub fn plan_step(
    bundle: &ModelBundle,
    state: &RopeState,
    current: &Observation,
    goal_embedding: &[f64],
    config: &PlanConfig,
    rng: &mut Rng,
) -> Result<PlanChoice> {
    bundle.require_forward()?;
    let size = bundle.arch.image_size;
    let candidates: Vec<Action> = (0..config.candidates)
        .map(|_| sample_action(state, size, rng))
        .collect();
    let h = encode_state(bundle, current)?;
    let scores = score_candidates(bundle, &h, goal_embedding, &candidates)?;
    let index = argmax(&scores);
    Ok(PlanChoice {
        action: candidates[index],
        index,
        scores,
    })
}

/// Per-episode random streams: candidate sampling and environment noise are
/// separate so every controller sees the same noise sequence.
pub fn episode_rngs(episode_seed: u64) -> (Rng, Rng) {
    (
        seed::child_rng(episode_seed, "candidates", 0),
        seed::child_rng(episode_seed, "noise", 0),
    )
}

fn goal_rollout(
    env: &EnvConfig,
    start: &RopeState,
    goal: &RopeState,
    horizon: usize,
    episode_seed: u64,
    mut policy: impl FnMut(&RopeState, &mut Rng) -> Result<Action>,
) -> Result<EpisodeRecord> {
    let (mut cand_rng, mut noise_rng) = episode_rngs(episode_seed);
    let mut state = start.clone();
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let action = policy(&state, &mut cand_rng)?;
        let next_state = step(&state, &action, env, &mut noise_rng);
        let error = geom_error(&next_state, goal)?;
        steps.push(StepRecord {
            state: std::mem::replace(&mut state, next_state.clone()),
            action,
            next_state,
            error,
        });
    }
    Ok(EpisodeRecord::new(Task::Goal, steps))
}

/// `horizon` rounds of (plan, execute). The goal embedding is computed once.
pub fn run_goal_directed(
    bundle: &ModelBundle,
    env: &EnvConfig,
    start: &RopeState,
    goal: &RopeState,
    config: &PlanConfig,
) -> Result<EpisodeRecord> {
    config.validate()?;
    bundle.require_forward()?;
    let kind = bundle.arch.obs_kind;
    let size = env.image_size;
    let goal_h = encode_state(bundle, &render(goal, kind, size))?;
    goal_rollout(env, start, goal, config.horizon, config.seed, |s, rng| {
        let obs = render(s, kind, size);
        Ok(plan_step(bundle, s, &obs, &goal_h, config, rng)?.action)
    })
}

/// Executes one exploration-distribution sample per step (the M = 1 planner
/// without a model).
pub fn run_random_policy(
    env: &EnvConfig,
    start: &RopeState,
    goal: &RopeState,
    config: &PlanConfig,
) -> Result<EpisodeRecord> {
    config.validate()?;
    let size = env.image_size;
    goal_rollout(env, start, goal, config.horizon, config.seed, |s, rng| {
        Ok(sample_action(s, size, rng))
    })
}

/// Observation sequence `d_0..d_T` with the states it was rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub states: Vec<RopeState>,
}

impl Demo {
    pub fn new(states: Vec<RopeState>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::Config("a demo needs at least two states".into()));
        }
        Ok(Self { states })
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observations(&self, kind: ObsKind, image_size: usize) -> Vec<Observation> {
        self.states
            .iter()
            .map(|s| render(s, kind, image_size))
            .collect()
    }
}

/// Scripted demonstrator: at each step tries `candidates` exploration
/// actions on a noiseless copy of the simulator and executes the one whose
/// outcome is closest to `goal`. Transitions are recorded in `env`'s mode.
pub fn expert_demo(
    env: &EnvConfig,
    start: &RopeState,
    goal: &RopeState,
    length: usize,
    candidates: usize,
    episode_seed: u64,
) -> Result<Demo> {
    let mut rng = seed::child_rng(episode_seed, "demo", 0);
    let mut noise = seed::child_rng(episode_seed, "demo-noise", 0);
    let det = env.with_mode(EnvMode::Deterministic);
    let mut states = vec![start.clone()];
    for _ in 0..length {
        let s = states.last().expect("non-empty");
        let mut best: Option<(f64, Action)> = None;
        for _ in 0..candidates.max(1) {
            let a = sample_action(s, env.image_size, &mut rng);
            let e = geom_error(&step(s, &a, &det, &mut rng), goal)?;
            if best.is_none_or(|(be, _)| e < be) {
                best = Some((e, a));
            }
        }
        let (_, a) = best.expect("at least one candidate");
        let next = step(s, &a, env, &mut noise);
        states.push(next);
    }
    Demo::new(states)
}

fn imitation_rollout(
    env: &EnvConfig,
    demo: &Demo,
    episode_seed: u64,
    mut policy: impl FnMut(&RopeState, usize) -> Result<Action>,
) -> Result<EpisodeRecord> {
    let (_, mut noise_rng) = episode_rngs(episode_seed);
    let mut state = demo.states[0].clone();
    let mut steps = Vec::with_capacity(demo.len());
    for t in 0..demo.len() {
        let action = policy(&state, t)?;
        let next_state = step(&state, &action, env, &mut noise_rng);
        let error = geom_error(&next_state, &demo.states[t + 1])?;
        steps.push(StepRecord {
            state: std::mem::replace(&mut state, next_state.clone()),
            action,
            next_state,
            error,
        });
    }
    Ok(EpisodeRecord::new(Task::Imitation, steps))
}

/// Follows `demo` from its first state: at step `t` the inverse model is fed
/// the current state and demo observation `d_{t+1}`, and the decoded action
/// is executed. Demo actions are never read.
pub fn imitate(
    bundle: &ModelBundle,
    env: &EnvConfig,
    demo: &Demo,
    episode_seed: u64,
) -> Result<EpisodeRecord> {
    bundle.require_inverse()?;
    let kind = bundle.arch.obs_kind;
    let size = env.image_size;
    let obs = demo.observations(kind, size);
    let targets = encode_state_batch(bundle, &obs[1..].iter().collect::<Vec<_>>())?;
    imitation_rollout(env, demo, episode_seed, |s, t| {
        let h = encode_state(bundle, &render(s, kind, size))?;
        let z = inverse_predict(bundle, &h, targets.row_slice(t))?;
        decode_action(bundle, &z)
    })
}

const WORDS_PER_ROW: usize = 64;

/// Binary raster packed into bits.
fn pack(obs: &Observation) -> Result<Vec<u64>> {
    if obs.kind != ObsKind::Raster {
        return Err(Error::shape(
            "nearest_neighbor",
            "raster observations required",
        ));
    }
    let mut bits = vec![0u64; obs.values.len().div_ceil(WORDS_PER_ROW)];
    for (i, &v) in obs.values.iter().enumerate() {
        if v > 0.5 {
            bits[i / 64] |= 1 << (i % 64);
        }
    }
    Ok(bits)
}

fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Pixel-space nearest-neighbour lookup over training transitions.
///
/// For binary rasters the squared Euclidean distance is the number of
/// differing pixels, so observations are stored as bitsets.
#[derive(Clone, Debug)]
pub struct NearestNeighbor {
    image_size: usize,
    current: Vec<Vec<u64>>,
    next: Vec<Vec<u64>>,
    actions: Vec<Action>,
}

impl NearestNeighbor {
    pub fn new(transitions: &[Transition], image_size: usize) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::EmptyDataset(
                "nearest-neighbour baseline needs training data",
            ));
        }
        let raster = |s: &RopeState| pack(&render(s, ObsKind::Raster, image_size));
        Ok(Self {
            image_size,
            current: transitions
                .iter()
                .map(|t| raster(&t.state))
                .collect::<Result<_>>()?,
            next: transitions
                .iter()
                .map(|t| raster(&t.next_state))
                .collect::<Result<_>>()?,
            actions: transitions.iter().map(|t| t.action).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Action of the record minimizing `‖o(s) − o(s_j)‖² + ‖o(d) − o(s'_j)‖²`;
    /// ties go to the lowest record index.
    pub fn query(&self, current: &Observation, target: &Observation) -> Result<Action> {
        let (c, t) = (pack(current)?, pack(target)?);
        if c.len() != self.current[0].len() || t.len() != c.len() {
            return Err(Error::shape(
                "nearest_neighbor",
                "observation size mismatch",
            ));
        }
        let mut best = (u32::MAX, 0);
        for j in 0..self.actions.len() {
            let d = hamming(&c, &self.current[j]) + hamming(&t, &self.next[j]);
            if d < best.0 {
                best = (d, j);
            }
        }
        Ok(self.actions[best.1])
    }

    pub fn imitate(
        &self,
        env: &EnvConfig,
        demo: &Demo,
        episode_seed: u64,
    ) -> Result<EpisodeRecord> {
        let obs = demo.observations(ObsKind::Raster, self.image_size);
        imitation_rollout(env, demo, episode_seed, |s, t| {
            self.query(&render(s, ObsKind::Raster, self.image_size), &obs[t + 1])
        })
    }
}

/// Mean cosine similarity between forward predictions and their true next
/// embeddings, and the mean over all mismatched pairs, on `transitions`.
pub fn forward_similarity_gap(
    bundle: &ModelBundle,
    transitions: &[Transition],
) -> Result<(f64, f64)> {
    bundle.require_forward()?;
    let kind = bundle.arch.obs_kind;
    let size = bundle.arch.image_size;
    let obs: Vec<Observation> = transitions
        .iter()
        .map(|t| render(&t.state, kind, size))
        .collect();
    let next: Vec<Observation> = transitions
        .iter()
        .map(|t| render(&t.next_state, kind, size))
        .collect();
    let h = encode_state_batch(bundle, &obs.iter().collect::<Vec<_>>())?;
    let hn = encode_state_batch(bundle, &next.iter().collect::<Vec<_>>())?;
    let actions: Vec<Action> = transitions.iter().map(|t| t.action).collect();

    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, false);
    let hi = g.constant(h);
    let a = g.constant(normalized_actions(&actions, size)?);
    let z = if bundle.variant == Variant::F {
        a
    } else {
        bound.encode_actions(&mut g, a)?
    };
    let pred = bound.predict_forward(&mut g, hi, z)?;
    let pred = g.forward_eval(pred, &[])?;
    let n = transitions.len();
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let s = cosine_sim(pred.row_slice(i), hn.row_slice(j))?;
            if i == j {
                pos += s;
            } else {
                neg += s;
            }
        }
    }
    Ok((pos / n as f64, neg / (n * (n - 1)) as f64))
}
