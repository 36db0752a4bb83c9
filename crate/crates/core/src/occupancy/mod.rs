//! Conditional models `M(·|z_t)` of the discounted distribution of future
//! latents, trained by generative TD against an EMA bootstrap copy `M′`.

mod eval;
mod neural;
mod tabular;
mod train;

use std::path::Path;
use std::sync::LazyLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use eval::{density_over_support, rollout, samples_over_support, GridSupport, SupportDist};
pub use neural::{NeuralConfig, NeuralOccupancy};
pub use tabular::{StepSize, TabularConfig, TabularOccupancy};
pub use train::{
    build_windows, td_train_step, train_td, write_training_log, LogRow, StepStats, TargetModel,
    TdModel, TrainOutcome, Window,
};

use crate::error::{Result, VocError};
use crate::registry::Registry;
use crate::rng::VocRng;
use crate::tokenizer::{LatentLayout, LatentState};

pub trait OccupancyModel: Send + Sync {
    fn backend(&self) -> &'static str;

    fn gamma(&self) -> f64;

    fn layout(&self) -> LatentLayout;

    /// One multinomial sample per conditioning latent.
    fn sample_batch(&self, conds: &[&LatentState], rng: &mut VocRng) -> Result<Vec<LatentState>>;

    /// `ln M(z_e | z)`; `-inf` where the model assigns zero probability.
    fn log_density(&self, z: &LatentState, z_e: &LatentState) -> Result<f64>;

    fn log_density_batch(&self, pairs: &[(&LatentState, &LatentState)]) -> Result<Vec<f64>> {
        pairs.iter().map(|(z, e)| self.log_density(z, e)).collect()
    }

    /// Whether `sample_batch` can condition on `z`.
    fn knows(&self, _z: &LatentState) -> bool {
        true
    }

    fn save(&self, path: &Path) -> Result<()>;

    fn sample_future(
        &self,
        z: &LatentState,
        n: usize,
        rng: &mut VocRng,
    ) -> Result<Vec<LatentState>> {
        self.sample_batch(&vec![z; n], rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossPositions {
    #[default]
    TargetOnly,
    AllPositions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Minibatches drawn uniformly with replacement.
    #[default]
    Uniform,
    /// Shuffled passes over every window.
    Epochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub k_max: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub ema_decay: f64,
    pub loss_positions: LossPositions,
    pub sampling: Sampling,
    pub seed: u64,
    pub log_every: u64,
    pub tabular: TabularConfig,
    pub neural: NeuralConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            k_max: 1,
            batch_size: 32,
            steps: 2000,
            ema_decay: 0.9,
            loss_positions: LossPositions::TargetOnly,
            sampling: Sampling::Uniform,
            seed: 0,
            log_every: 100,
            tabular: TabularConfig::default(),
            neural: NeuralConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(VocError::Config(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        if self.k_max == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(VocError::Config(
                "k_max, batch_size and log_every must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(VocError::Config(format!(
                "ema_decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    NextStep,
    KStep(usize),
    Bootstrap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalTarget {
    pub tokens: LatentState,
    pub branch: Branch,
}

/// Offset `k` with probability `γ^{k-1}(1-γ)` for `k ≤ k_max`, otherwise bootstrap.
pub fn draw_branch<R: Rng + ?Sized>(gamma: f64, k_max: usize, rng: &mut R) -> Branch {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut w = 1.0 - gamma;
    for k in 1..=k_max {
        cum += w;
        if u < cum {
            return if k == 1 {
                Branch::NextStep
            } else {
                Branch::KStep(k)
            };
        }
        w *= gamma;
    }
    Branch::Bootstrap
}

/// Future latent an offset branch resolves to, falling back to the last one
/// available when the drawn offset runs past the window.
pub fn offset_target(futures: &[LatentState], branch: Branch) -> Option<&LatentState> {
    let k = match branch {
        Branch::NextStep => 1,
        Branch::KStep(k) => k,
        Branch::Bootstrap => return None,
    };
    futures.get(k.min(futures.len()).checked_sub(1)?)
}

/// Draws `z_temporal` for one window `futures = (z_{t+1}, …)`. The bootstrap
/// conditions on the last latent of the window.
pub fn sample_temporal_target(
    futures: &[LatentState],
    target: &dyn OccupancyModel,
    k_max: usize,
    rng: &mut VocRng,
) -> Result<TemporalTarget> {
    let last = futures
        .last()
        .ok_or_else(|| VocError::InvalidInput("empty future window".into()))?;
    let branch = draw_branch(target.gamma(), k_max, rng);
    let tokens = match offset_target(futures, branch) {
        Some(z) => z.clone(),
        None => target.sample_batch(&[last], rng)?.remove(0),
    };
    Ok(TemporalTarget { tokens, branch })
}

/// Backend entry points selected by name.
pub trait OccupancyBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn init(&self, layout: LatentLayout, cfg: &TrainConfig) -> Result<Box<dyn OccupancyModel>>;

    fn train(
        &self,
        layout: LatentLayout,
        data: &[crate::occupancy::LatentTrajectory],
        cfg: &TrainConfig,
    ) -> Result<(Box<dyn OccupancyModel>, Vec<LogRow>)>;

    fn load(&self, path: &Path) -> Result<Box<dyn OccupancyModel>>;
}

/// Latents of one trajectory. `terminal` marks a trajectory that ended its
/// episode, so windows near the end may be shorter than `k_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub latents: Vec<LatentState>,
    pub terminal: bool,
}

impl LatentTrajectory {
    /// One single-token latent per state of a finite chain; pairs with
    /// [`LatentLayout::states`].
    pub fn from_states(states: &[usize], terminal: bool) -> Self {
        Self {
            latents: states.iter().map(|&s| state_latent(s)).collect(),
            terminal,
        }
    }
}

/// The single-token latent standing for state `s` of a finite chain.
pub fn state_latent(s: usize) -> LatentState {
    LatentState::new(vec![s as u16], 1).expect("one token, one token per frame")
}

struct Tabular;
struct Neural;

impl OccupancyBackend for Tabular {
    fn name(&self) -> &'static str {
        "tabular"
    }

    fn init(&self, layout: LatentLayout, cfg: &TrainConfig) -> Result<Box<dyn OccupancyModel>> {
        Ok(Box::new(TabularOccupancy::new(
            layout,
            cfg.gamma,
            cfg.tabular.clone(),
        )?))
    }

    fn train(
        &self,
        layout: LatentLayout,
        data: &[LatentTrajectory],
        cfg: &TrainConfig,
    ) -> Result<(Box<dyn OccupancyModel>, Vec<LogRow>)> {
        let model = TabularOccupancy::new(layout, cfg.gamma, cfg.tabular.clone())?;
        let out = train_td(model, data, cfg)?;
        Ok((Box::new(out.model), out.log))
    }

    fn load(&self, path: &Path) -> Result<Box<dyn OccupancyModel>> {
        Ok(Box::new(TabularOccupancy::load(path)?))
    }
}

impl OccupancyBackend for Neural {
    fn name(&self) -> &'static str {
        "neural"
    }

    fn init(&self, layout: LatentLayout, cfg: &TrainConfig) -> Result<Box<dyn OccupancyModel>> {
        Ok(Box::new(NeuralOccupancy::new(
            layout,
            cfg.gamma,
            cfg.neural.clone(),
            cfg.loss_positions,
            cfg.seed,
        )?))
    }

    fn train(
        &self,
        layout: LatentLayout,
        data: &[LatentTrajectory],
        cfg: &TrainConfig,
    ) -> Result<(Box<dyn OccupancyModel>, Vec<LogRow>)> {
        let mut model = NeuralOccupancy::new(
            layout,
            cfg.gamma,
            cfg.neural.clone(),
            cfg.loss_positions,
            cfg.seed,
        )?;
        model.set_total_steps(cfg.steps);
        let out = train_td(model, data, cfg)?;
        Ok((Box::new(out.model), out.log))
    }

    fn load(&self, path: &Path) -> Result<Box<dyn OccupancyModel>> {
        Ok(Box::new(NeuralOccupancy::load(path)?))
    }
}

static BACKENDS: LazyLock<Registry<(), dyn OccupancyBackend>> = LazyLock::new(|| {
    Registry::new("occupancy backend")
        .register("tabular", |_| {
            Ok(Box::new(Tabular) as Box<dyn OccupancyBackend>)
        })
        .register("neural", |_| {
            Ok(Box::new(Neural) as Box<dyn OccupancyBackend>)
        })
});

pub fn backend_registry() -> &'static Registry<(), dyn OccupancyBackend> {
    &BACKENDS
}

pub fn backend(name: &str) -> Result<Box<dyn OccupancyBackend>> {
    BACKENDS.build(name, &())
}

/// Loads a checkpoint of either backend by reading its `backend` field.
pub fn load_model(path: &Path) -> Result<Box<dyn OccupancyModel>> {
    let bytes = std::fs::read(path)?;
    let name = peek_backend(&bytes)?;
    backend(&name)?.load(path)
}

fn peek_backend(bytes: &[u8]) -> Result<String> {
    let head = bytes
        .get(..8)
        .ok_or_else(|| VocError::Format("checkpoint shorter than its length prefix".into()))?;
    let n = u64::from_le_bytes(head.try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(8..8 + n)
        .ok_or_else(|| VocError::Format("truncated checkpoint header".into()))?;
    let v: serde_json::Value = serde_json::from_slice(json)?;
    v["hyperparameters"]["backend"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| VocError::Format("checkpoint header names no backend".into()))
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut VocRng) -> usize {
    crate::env::sample_index(probs, rng)
}
