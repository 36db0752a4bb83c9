use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{GridWorld, DOWN, LEFT, NUM_ACTIONS, RIGHT, UP};
use super::mdp::PolicyMatrix;
use crate::error::{Result, VocError};

/// Behavior policy used to collect trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Policy {
    UniformRandom,
    /// With probability `epsilon` a uniform action, otherwise a move that
    /// reduces the row gap to the goal first, then the column gap.
    EpsilonGreedyToGoal {
        epsilon: f64,
    },
    /// Repeats `actions` cyclically, ignoring the state.
    FixedActionSequence {
        actions: Vec<usize>,
    },
}

impl Default for Policy {
    fn default() -> Self {
        Policy::UniformRandom
    }
}

/// Action that moves toward the goal; `None` at the goal itself.
pub fn greedy_to_goal(env: &GridWorld) -> Option<usize> {
    let (a, g) = (env.agent(), env.goal());
    if a.row < g.row {
        Some(DOWN)
    } else if a.row > g.row {
        Some(UP)
    } else if a.col < g.col {
        Some(RIGHT)
    } else if a.col > g.col {
        Some(LEFT)
    } else {
        None
    }
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match self {
            Policy::UniformRandom => Ok(()),
            Policy::EpsilonGreedyToGoal { epsilon } if (0.0..=1.0).contains(epsilon) => Ok(()),
            Policy::EpsilonGreedyToGoal { .. } => {
                Err(VocError::Config("epsilon must lie in [0, 1]".into()))
            }
            Policy::FixedActionSequence { actions }
                if !actions.is_empty() && actions.iter().all(|a| *a < NUM_ACTIONS) =>
            {
                Ok(())
            }
            Policy::FixedActionSequence { .. } => Err(VocError::Config(
                "fixed action sequence must be non-empty with actions < 4".into(),
            )),
        }
    }

    /// Action distribution in the current state; `None` for the time-indexed sequence policy.
    pub fn action_probs(&self, env: &GridWorld) -> Option<[f64; NUM_ACTIONS]> {
        let uniform = [1.0 / NUM_ACTIONS as f64; NUM_ACTIONS];
        match self {
            Policy::UniformRandom => Some(uniform),
            Policy::EpsilonGreedyToGoal { epsilon } => match greedy_to_goal(env) {
                None => Some(uniform),
                Some(g) => {
                    let mut p = [epsilon / NUM_ACTIONS as f64; NUM_ACTIONS];
                    p[g] += 1.0 - epsilon;
                    Some(p)
                }
            },
            Policy::FixedActionSequence { .. } => None,
        }
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, env: &GridWorld, t: usize, rng: &mut R) -> usize {
        match self {
            Policy::UniformRandom => rng.random_range(0..NUM_ACTIONS),
            Policy::EpsilonGreedyToGoal { epsilon } => {
                let explore = rng.random::<f64>() < *epsilon;
                match greedy_to_goal(env) {
                    Some(g) if !explore => g,
                    _ => rng.random_range(0..NUM_ACTIONS),
                }
            }
            Policy::FixedActionSequence { actions } => actions[t % actions.len()],
        }
    }

    /// Markov policy matrix over all grid states.
    pub fn as_matrix(&self, env: &GridWorld) -> Result<PolicyMatrix> {
        let n = env.n_states();
        let mut probs = Vec::with_capacity(n * NUM_ACTIONS);
        for s in 0..n {
            let e = env.with_state(s)?;
            let p = self.action_probs(&e).ok_or_else(|| {
                VocError::Config(
                    "a fixed action sequence has no state-indexed policy matrix".into(),
                )
            })?;
            probs.extend_from_slice(&p);
        }
        PolicyMatrix::new(n, NUM_ACTIONS, probs)
    }
}
