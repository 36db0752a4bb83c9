use crate::error::{Result, VocError};

const PROB_TOL: f64 = 1e-12;

/// Finite MDP with state-based reward `r[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Flattened `P[s][a][s']`.
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub initial_dist: Vec<f64>,
}

impl MdpSpec {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial_dist,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, a) = (self.n_states, self.n_actions);
        if n == 0 || a == 0 {
            return Err(VocError::InvalidInput(
                "MDP needs at least one state and action".into(),
            ));
        }
        if self.transition.len() != n * a * n
            || self.reward.len() != n
            || self.initial_dist.len() != n
        {
            return Err(VocError::InvalidInput(
                "MDP array sizes do not match n_states/n_actions".into(),
            ));
        }
        check_distribution(&self.initial_dist, "initial_dist")?;
        for s in 0..n {
            for act in 0..a {
                check_distribution(self.row(s, act), &format!("P[{s}][{act}]"))?;
            }
        }
        Ok(())
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        let start = (s * self.n_actions + a) * n;
        &self.transition[start..start + n]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    /// State-to-state matrix `P_pi[s][s'] = sum_a pi(a|s) P[s][a][s']`.
    pub fn policy_transition(&self, policy: &PolicyMatrix) -> Result<Vec<Vec<f64>>> {
        if policy.n_states != self.n_states || policy.n_actions != self.n_actions {
            return Err(VocError::InvalidInput(
                "policy shape does not match MDP".into(),
            ));
        }
        let n = self.n_states;
        let mut p = vec![vec![0.0; n]; n];
        for (s, row) in p.iter_mut().enumerate() {
            for a in 0..self.n_actions {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (dst, src) in row.iter_mut().zip(self.row(s, a)) {
                    *dst += w * src;
                }
            }
        }
        Ok(p)
    }

    /// Deterministic cycle `0 -> 1 -> ... -> n-1 -> 0` with a single action.
    pub fn cycle(n: usize, reward: Vec<f64>) -> Result<Self> {
        let mut t = vec![0.0; n * n];
        for s in 0..n {
            t[s * n + (s + 1) % n] = 1.0;
        }
        Self::new(n, 1, t, reward, vec![1.0 / n as f64; n])
    }

    /// Single-action chain from explicit state-to-state rows.
    pub fn from_chain(rows: Vec<Vec<f64>>, reward: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        let transition = rows.into_iter().flatten().collect();
        Self::new(n, 1, transition, reward, vec![1.0 / n as f64; n])
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(VocError::InvalidInput(format!(
            "{what} has entries outside [0, 1]"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(VocError::InvalidInput(format!(
            "{what} sums to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Stationary (Markov) policy `pi(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyMatrix {
    pub n_states: usize,
    pub n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyMatrix {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(VocError::InvalidInput(
                "policy matrix has wrong size".into(),
            ));
        }
        for s in 0..n_states {
            check_distribution(
                &probs[s * n_actions..(s + 1) * n_actions],
                &format!("pi(.|{s})"),
            )?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}
