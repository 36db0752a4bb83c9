//! Reading a model out as a distribution over an enumerated set of latents.

use super::OccupancyModel;
use crate::env::GridWorld;
use crate::error::{Result, VocError};
use crate::oracle::{empirical_dist, EmpiricalDist};
use crate::rng::VocRng;
use crate::tokenizer::{LatentState, Tokenizer};

#[derive(Clone, Debug, PartialEq)]
pub struct SupportDist {
    /// Model probabilities renormalized over the support.
    pub probs: Vec<f64>,
    /// Probability the model puts on the support before renormalizing.
    pub mass: f64,
}

pub fn density_over_support(
    model: &dyn OccupancyModel,
    cond: &LatentState,
    support: &[LatentState],
) -> Result<SupportDist> {
    let pairs: Vec<(&LatentState, &LatentState)> = support.iter().map(|e| (cond, e)).collect();
    let p: Vec<f64> = model
        .log_density_batch(&pairs)?
        .into_iter()
        .map(f64::exp)
        .collect();
    let mass: f64 = p.iter().sum();
    if !(mass > 0.0) {
        return Err(VocError::InvalidInput(
            "model puts no mass on the support".into(),
        ));
    }
    Ok(SupportDist {
        probs: p.into_iter().map(|x| x / mass).collect(),
        mass,
    })
}

pub fn samples_over_support(
    model: &dyn OccupancyModel,
    cond: &LatentState,
    support: &[LatentState],
    n: usize,
    rng: &mut VocRng,
) -> Result<EmpiricalDist> {
    empirical_dist(&model.sample_future(cond, n, rng)?, support)
}

/// `z^(i+1) ~ M(·|z^(i))` for `n_model_steps` steps, excluding `z0`.
pub fn rollout(
    model: &dyn OccupancyModel,
    z0: &LatentState,
    n_model_steps: usize,
    rng: &mut VocRng,
) -> Result<Vec<LatentState>> {
    let mut out: Vec<LatentState> = Vec::with_capacity(n_model_steps);
    for _ in 0..n_model_steps {
        let cur = out.last().unwrap_or(z0);
        let next = model.sample_batch(&[cur], rng)?.remove(0);
        out.push(next);
    }
    Ok(out)
}

/// Every latent the gridworld can produce: stacks of states where each frame
/// stays put or moves one cell, with the newest state of each.
#[derive(Clone, Debug)]
pub struct GridSupport {
    pub latents: Vec<LatentState>,
    pub state_of: Vec<usize>,
    pub n_states: usize,
}

impl GridSupport {
    pub fn new(tok: &Tokenizer, env: &GridWorld) -> Result<Self> {
        let n = env.n_states();
        let frames: Vec<_> = (0..n)
            .map(|s| env.with_state(s).map(|e| e.render()))
            .collect::<Result<_>>()?;
        let adjacent = |a: usize, b: usize| {
            let (p, q) = (env.pos_of(a), env.pos_of(b));
            p.row.abs_diff(q.row) + p.col.abs_diff(q.col) <= 1
        };
        let mut chains: Vec<Vec<usize>> = (0..n).map(|s| vec![s]).collect();
        for _ in 1..tok.stack_size() {
            chains = chains
                .into_iter()
                .flat_map(|c| {
                    let last = *c.last().expect("non-empty chain");
                    (0..n).filter(move |&s| adjacent(last, s)).map(move |s| {
                        let mut c = c.clone();
                        c.push(s);
                        c
                    })
                })
                .collect();
        }
        let mut latents = Vec::with_capacity(chains.len());
        let mut state_of = Vec::with_capacity(chains.len());
        for c in &chains {
            let window: Vec<_> = c.iter().map(|&s| &frames[s]).collect();
            latents.push(tok.encode(&window)?);
            state_of.push(*c.last().expect("non-empty chain"));
        }
        Ok(Self {
            latents,
            state_of,
            n_states: n,
        })
    }

    /// Index of the single-state latent (all frames equal) for state `s`.
    pub fn still(&self, tok: &Tokenizer, env: &GridWorld, s: usize) -> Result<LatentState> {
        let f = env.with_state(s)?.render();
        tok.encode(&vec![&f; tok.stack_size()])
    }

    /// Collapses a distribution over `latents` onto states.
    pub fn to_states(&self, probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states];
        for (p, s) in probs.iter().zip(&self.state_of) {
            out[*s] += p;
        }
        out
    }
}
