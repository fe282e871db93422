use crate::env::{reset, sample_action, step, Action, EnvConfig, RopeState};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub trajectory: usize,
    pub step: usize,
    pub state: RopeState,
    pub action: Action,
    pub next_state: RopeState,
}

/// Transitions ordered by trajectory then step. Trajectories
/// `0..train_trajectories` form the training split, the rest the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: EnvConfig,
    pub trajectories: usize,
    pub length: usize,
    pub train_trajectories: usize,
    pub transitions: Vec<Transition>,
}

/// Number of training trajectories out of `total` (75%, rounded up).
pub fn train_split(total: usize) -> usize {
    (3 * total).div_ceil(4)
}

impl Dataset {
    pub fn empty(env: EnvConfig) -> Self {
        Self {
            env,
            trajectories: 0,
            length: 0,
            train_trajectories: 0,
            transitions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn split_point(&self) -> usize {
        self.transitions
            .partition_point(|t| t.trajectory < self.train_trajectories)
    }

    pub fn train(&self) -> &[Transition] {
        &self.transitions[..self.split_point()]
    }

    pub fn test(&self) -> &[Transition] {
        &self.transitions[self.split_point()..]
    }

    /// Index of the transition that follows `i` within its trajectory.
    pub fn successor(&self, i: usize) -> Option<usize> {
        let t = &self.transitions[i];
        self.transitions
            .get(i + 1)
            .filter(|n| n.trajectory == t.trajectory && n.step == t.step + 1)
            .map(|_| i + 1)
    }

    /// Transitions grouped by trajectory, in order.
    pub fn trajectories_in(records: &[Transition]) -> Vec<&[Transition]> {
        records
            .chunk_by(|a, b| a.trajectory == b.trajectory)
            .collect()
    }
}

/// `trajectories` rollouts of `length` random exploration steps each.
///
/// Trajectory `k` draws its reset from child seed `("reset", k)` and its
/// actions and noise from child stream `("trajectory", k)`.
pub fn collect_dataset(env: &EnvConfig, trajectories: usize, length: usize, seed: u64) -> Dataset {
    let mut transitions = Vec::with_capacity(trajectories * length);
    for k in 0..trajectories {
        let mut state = reset(env, seed::child_seed(seed, "reset", k as u64));
        let mut rng = seed::child_rng(seed, "trajectory", k as u64);
        for t in 0..length {
            let action = sample_action(&state, env.image_size, &mut rng);
            let next_state = step(&state, &action, env, &mut rng);
            transitions.push(Transition {
                trajectory: k,
                step: t,
                state: std::mem::replace(&mut state, next_state.clone()),
                action,
                next_state,
            });
        }
    }
    Dataset {
        env: *env,
        trajectories,
        length,
        train_trajectories: train_split(trajectories),
        transitions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trajectory_is_contiguous() {
        let d = collect_dataset(&EnvConfig::default(), 1, 20, 1);
        assert_eq!(d.len(), 20);
        for (i, t) in d.transitions.iter().enumerate() {
            assert_eq!((t.trajectory, t.step), (0, i));
        }
        for w in d.transitions.windows(2) {
            assert_eq!(w[0].next_state, w[1].state);
        }
        assert_eq!(d.successor(18), Some(19));
        assert_eq!(d.successor(19), None);
    }

    #[test]
    fn split_is_by_whole_trajectories() {
        let d = collect_dataset(&EnvConfig::default(), 8, 5, 2);
        assert_eq!(d.train().len(), 30);
        assert_eq!(d.test().len(), 10);
        assert!(d.test().iter().all(|t| t.trajectory >= 6));
        assert_eq!(Dataset::trajectories_in(d.test()).len(), 2);
        assert_eq!(train_split(2000), 1500);
        assert_eq!(train_split(1), 1);
    }

    #[test]
    fn collection_is_seeded() {
        let c = EnvConfig::default();
        assert_eq!(collect_dataset(&c, 3, 4, 9), collect_dataset(&c, 3, 4, 9));
        assert_ne!(collect_dataset(&c, 3, 4, 9), collect_dataset(&c, 3, 4, 10));
    }

    #[test]
    fn prefix_of_trajectories_is_reproducible_in_isolation() {
        let c = EnvConfig::default();
        let a = collect_dataset(&c, 2, 6, 4);
        let b = collect_dataset(&c, 5, 6, 4);
        assert_eq!(a.transitions[..], b.transitions[..12]);
    }
}
