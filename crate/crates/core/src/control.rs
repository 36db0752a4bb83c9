//! Model-predictive control: each step peeks the next frame for a handful of
//! candidate actions and takes the one whose peeked latent scores highest.

use std::io::Write;
use std::sync::{Arc, LazyLock};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Frame, GridWorld, NUM_ACTIONS};
use crate::error::{Result, VocError};
use crate::occupancy::OccupancyModel;
use crate::registry::Registry;
use crate::rng::{rng_for, streams, VocRng};
use crate::tokenizer::{LatentState, Tokenizer};
use crate::valuation::{value_by_sampling, LatentReward};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateMode {
    /// A fresh draw of `candidates_per_step` buffer actions, without replacement, every step.
    #[default]
    PerStep,
    /// The whole buffer every step.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub episode_len: usize,
    pub n_episodes: usize,
    pub candidate_buffer_size: usize,
    pub candidates_per_step: usize,
    pub candidate_mode: CandidateMode,
    pub n_value_samples: usize,
    /// Scorer name, one of [`scorer_registry`].
    pub method: String,
    /// Start cell as `(row, col)`; `None` draws a uniform non-goal cell per episode.
    pub start: Option<(usize, usize)>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            episode_len: 20,
            n_episodes: 20,
            candidate_buffer_size: 100,
            candidates_per_step: 10,
            candidate_mode: CandidateMode::PerStep,
            n_value_samples: 100,
            method: "voc".into(),
            start: None,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.episode_len,
            self.n_episodes,
            self.candidate_buffer_size,
            self.candidates_per_step,
            self.n_value_samples,
        ];
        if counts.contains(&0) {
            return Err(VocError::Config(format!(
                "MPC counts must all be at least 1: {self:?}"
            )));
        }
        if self.candidates_per_step > self.candidate_buffer_size {
            return Err(VocError::Config(format!(
                "{} candidates per step exceed the buffer of {}",
                self.candidates_per_step, self.candidate_buffer_size
            )));
        }
        Ok(())
    }
}

/// Where candidate actions come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CandidateSource<'a> {
    /// Actions of an expert or behaviour dataset.
    Dataset(&'a [usize]),
    Uniform {
        n_actions: usize,
    },
}

/// A fixed multiset of `size` candidate actions. Dataset actions are drawn
/// without replacement, cycling through a fresh shuffle if `size` exceeds them.
pub fn build_candidate_buffer(
    source: CandidateSource<'_>,
    size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(VocError::InvalidInput(
            "candidate buffer size must be at least 1".into(),
        ));
    }
    let mut rng = rng_for(seed, streams::MPC);
    match source {
        CandidateSource::Dataset(actions) => {
            if actions.is_empty() {
                return Err(VocError::InvalidInput(
                    "no actions to build a candidate buffer from".into(),
                ));
            }
            let mut out = Vec::with_capacity(size);
            while out.len() < size {
                let mut pool = actions.to_vec();
                pool.shuffle(&mut rng);
                out.extend(pool.into_iter().take(size - out.len()));
            }
            Ok(out)
        }
        CandidateSource::Uniform { n_actions } => {
            if n_actions == 0 {
                return Err(VocError::InvalidInput(
                    "uniform candidates need at least one action".into(),
                ));
            }
            Ok((0..size).map(|_| rng.random_range(0..n_actions)).collect())
        }
    }
}

/// The outcome of trying one candidate on a copy of the environment.
#[derive(Clone, Debug)]
pub struct Peek {
    pub action: usize,
    pub env: GridWorld,
    pub reward: f64,
    /// Latent of the frame stack ending at the peeked frame.
    pub latent: LatentState,
}

pub trait CandidateScorer: Send + Sync {
    fn name(&self) -> &'static str;

    fn score(&self, peek: &Peek, rng: &mut VocRng) -> Result<f64>;
}

/// Sampled value of the peeked latent under an occupancy model.
pub struct ModelValue {
    name: &'static str,
    model: Arc<dyn OccupancyModel>,
    reward: Arc<dyn LatentReward>,
    n_samples: usize,
}

impl CandidateScorer for ModelValue {
    fn name(&self) -> &'static str {
        self.name
    }

    /// A latent the model never conditioned on ranks below every other candidate.
    fn score(&self, peek: &Peek, rng: &mut VocRng) -> Result<f64> {
        if !self.model.knows(&peek.latent) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(value_by_sampling(
            self.model.as_ref(),
            self.reward.as_ref(),
            &peek.latent,
            self.n_samples,
            rng,
        )?
        .mean)
    }
}

/// Predicted reward of the peeked latent alone.
pub struct NoLookahead {
    reward: Arc<dyn LatentReward>,
}

impl CandidateScorer for NoLookahead {
    fn name(&self) -> &'static str {
        "no-lookahead"
    }

    fn score(&self, peek: &Peek, _rng: &mut VocRng) -> Result<f64> {
        self.reward.reward(&peek.latent)
    }
}

/// Independent uniform scores, so the argmax is a uniformly random candidate.
pub struct NoModel;

impl CandidateScorer for NoModel {
    fn name(&self) -> &'static str {
        "no-model"
    }

    fn score(&self, _peek: &Peek, rng: &mut VocRng) -> Result<f64> {
        Ok(rng.random())
    }
}

/// `r(s') + γ V(s')` from exact state values, read off the peeked ground-truth state.
pub struct OracleValue {
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl CandidateScorer for OracleValue {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn score(&self, peek: &Peek, _rng: &mut VocRng) -> Result<f64> {
        let s = peek.env.state_id();
        match (self.values.get(s), self.rewards.get(s)) {
            (Some(v), Some(r)) => Ok(r + self.gamma * v),
            _ => Err(VocError::InvalidInput(format!(
                "no oracle value for state {s}"
            ))),
        }
    }
}

/// Artifacts a scorer may need; each constructor takes what it uses.
#[derive(Clone, Default)]
pub struct ScorerContext {
    pub model: Option<Arc<dyn OccupancyModel>>,
    /// A randomly initialized neural model; tabular tables cannot sample before training.
    pub init_model: Option<Arc<dyn OccupancyModel>>,
    pub reward: Option<Arc<dyn LatentReward>>,
    pub n_value_samples: usize,
    pub oracle: Option<Arc<OracleValue>>,
}

fn need<T: Clone>(x: &Option<T>, what: &str, method: &str) -> Result<T> {
    x.clone()
        .ok_or_else(|| VocError::Config(format!("MPC method `{method}` needs {what}")))
}

fn build_voc(c: &ScorerContext) -> Result<Box<dyn CandidateScorer>> {
    Ok(Box::new(ModelValue {
        name: "voc",
        model: need(&c.model, "a trained occupancy model", "voc")?,
        reward: need(&c.reward, "a reward model", "voc")?,
        n_samples: c.n_value_samples.max(1),
    }))
}

fn build_init(c: &ScorerContext) -> Result<Box<dyn CandidateScorer>> {
    Ok(Box::new(ModelValue {
        name: "init-model",
        model: need(&c.init_model, "an untrained occupancy model", "init-model")?,
        reward: need(&c.reward, "a reward model", "init-model")?,
        n_samples: c.n_value_samples.max(1),
    }))
}

fn build_no_lookahead(c: &ScorerContext) -> Result<Box<dyn CandidateScorer>> {
    Ok(Box::new(NoLookahead {
        reward: need(&c.reward, "a reward model", "no-lookahead")?,
    }))
}

fn build_no_model(_: &ScorerContext) -> Result<Box<dyn CandidateScorer>> {
    Ok(Box::new(NoModel))
}

fn build_oracle(c: &ScorerContext) -> Result<Box<dyn CandidateScorer>> {
    let o = need(&c.oracle, "exact state values", "oracle")?;
    Ok(Box::new(OracleValue {
        values: o.values.clone(),
        rewards: o.rewards.clone(),
        gamma: o.gamma,
    }))
}

static SCORERS: LazyLock<Registry<ScorerContext, dyn CandidateScorer>> = LazyLock::new(|| {
    Registry::new("MPC method")
        .register("voc", build_voc)
        .register("no-model", build_no_model)
        .register("init-model", build_init)
        .register("no-lookahead", build_no_lookahead)
        .register("oracle", build_oracle)
});

pub fn scorer_registry() -> &'static Registry<ScorerContext, dyn CandidateScorer> {
    &SCORERS
}

pub fn build_scorer(method: &str, ctx: &ScorerContext) -> Result<Box<dyn CandidateScorer>> {
    SCORERS.build(method, ctx)
}

/// Index of the best score; ties go to the lowest action, then the earliest candidate.
pub fn argmax_candidate(actions: &[usize], scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..actions.len().min(scores.len()) {
        best = match best {
            None => Some(i),
            Some(b)
                if scores[i] > scores[b] || (scores[i] == scores[b] && actions[i] < actions[b]) =>
            {
                Some(i)
            }
            keep => keep,
        };
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepChoice {
    pub action: usize,
    pub score: f64,
}

/// Peeks every candidate from `env` and returns the best-scoring action.
/// `history` holds the frames seen so far, newest last.
pub fn mpc_step(
    env: &GridWorld,
    history: &[Frame],
    tok: &Tokenizer,
    scorer: &dyn CandidateScorer,
    candidates: &[usize],
    peek_rng: &mut VocRng,
    score_rng: &mut VocRng,
) -> Result<StepChoice> {
    if candidates.is_empty() {
        return Err(VocError::InvalidInput("no candidate actions".into()));
    }
    let keep = tok.stack_size().saturating_sub(1);
    let mut stack: Vec<Frame> = history[history.len().saturating_sub(keep)..].to_vec();
    let mut scores = Vec::with_capacity(candidates.len());
    for &a in candidates {
        let (next, reward, _) = env.step(a, peek_rng)?;
        stack.push(next.render());
        let latent = tok.latent_from_history(&stack)?;
        stack.pop();
        let peek = Peek {
            action: a,
            env: next,
            reward,
            latent,
        };
        scores.push(scorer.score(&peek, score_rng)?);
    }
    let i = argmax_candidate(candidates, &scores).expect("candidates are non-empty");
    Ok(StepChoice {
        action: candidates[i],
        score: scores[i],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub start_state: usize,
    pub undiscounted_return: f64,
    pub actions: Vec<usize>,
    pub chosen_scores: Vec<f64>,
}

/// Box-plot summary: linear-interpolated quartiles.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(VocError::InvalidInput("box statistics of no values".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Ok(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcRun {
    pub method: String,
    pub episodes: Vec<EpisodeResult>,
    pub summary: BoxStats,
}

/// `n_episodes` episodes from `env`'s layout. Episode `i` draws its start,
/// transitions and candidates from stream `MPC + i`, its peeks from
/// `PEEK + i` and its value samples from `EVAL + i`, so episodes are
/// independent of each other and of the scorer.
pub fn run_mpc(
    env: &GridWorld,
    tok: &Tokenizer,
    scorer: &dyn CandidateScorer,
    buffer: &[usize],
    cfg: &MpcConfig,
    seed: u64,
) -> Result<MpcRun> {
    cfg.validate()?;
    if buffer.len() < cfg.candidates_per_step {
        return Err(VocError::Config(format!(
            "buffer of {} actions cannot supply {} candidates per step",
            buffer.len(),
            cfg.candidates_per_step
        )));
    }
    if let Some(a) = buffer.iter().find(|&&a| a >= NUM_ACTIONS) {
        return Err(VocError::InvalidInput(format!(
            "candidate action {a} is out of range"
        )));
    }
    let mut episodes = Vec::with_capacity(cfg.n_episodes);
    for i in 0..cfg.n_episodes as u64 {
        let mut rng = rng_for(seed, streams::MPC + i);
        let mut peek_rng = rng_for(seed, streams::PEEK + i);
        let mut score_rng = rng_for(seed, streams::EVAL + i);
        let mut cur = match cfg.start {
            Some((row, col)) => env.with_agent(crate::env::Pos::new(row, col))?,
            None => {
                let goal = env.goal_id();
                let n = env.n_states();
                if n < 2 {
                    return Err(VocError::Config("no non-goal start cell".into()));
                }
                let s = rng.random_range(0..n - 1);
                env.with_state(if s >= goal { s + 1 } else { s })?
            }
        };
        let start_state = cur.state_id();
        let mut history = vec![cur.render()];
        let mut total = 0.0;
        let mut actions = Vec::with_capacity(cfg.episode_len);
        let mut scores = Vec::with_capacity(cfg.episode_len);
        for _ in 0..cfg.episode_len {
            let candidates: Vec<usize> = match cfg.candidate_mode {
                CandidateMode::Fixed => buffer.to_vec(),
                CandidateMode::PerStep => {
                    index::sample(&mut rng, buffer.len(), cfg.candidates_per_step)
                        .into_iter()
                        .map(|j| buffer[j])
                        .collect()
                }
            };
            let choice = mpc_step(
                &cur,
                &history,
                tok,
                scorer,
                &candidates,
                &mut peek_rng,
                &mut score_rng,
            )?;
            let (next, r, done) = cur.step(choice.action, &mut rng)?;
            total += r;
            actions.push(choice.action);
            scores.push(choice.score);
            history.push(next.render());
            cur = next;
            if done {
                break;
            }
        }
        episodes.push(EpisodeResult {
            start_state,
            undiscounted_return: total,
            actions,
            chosen_scores: scores,
        });
    }
    let returns: Vec<f64> = episodes.iter().map(|e| e.undiscounted_return).collect();
    Ok(MpcRun {
        method: scorer.name().to_string(),
        episodes,
        summary: BoxStats::of(&returns)?,
    })
}

/// `method,episode,return` rows.
pub fn write_results_csv<W: Write>(mut w: W, runs: &[&MpcRun]) -> Result<()> {
    writeln!(w, "method,episode,return")?;
    for run in runs {
        for (i, e) in run.episodes.iter().enumerate() {
            writeln!(w, "{},{i},{}", run.method, e.undiscounted_return)?;
        }
    }
    Ok(())
}

/// `method,mean,min,q1,median,q3,max` rows.
pub fn write_summary_csv<W: Write>(mut w: W, runs: &[&MpcRun]) -> Result<()> {
    writeln!(w, "method,mean,min,q1,median,q3,max")?;
    for run in runs {
        let s = &run.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            run.method, s.mean, s.min, s.q1, s.median, s.q3, s.max
        )?;
    }
    Ok(())
}
