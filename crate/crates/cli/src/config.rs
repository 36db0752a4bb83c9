//! Experiment configuration: one JSON document for every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use voc_core::control::{CandidateMode, MpcConfig};
use voc_core::env::{GridConfig, GridWorld, Policy, Pos};
use voc_core::occupancy::{LossPositions, NeuralConfig, Sampling, TabularConfig, TrainConfig};
use voc_core::tokenizer::InverseDynamicsConfig;
use voc_core::valuation::{DensityVariant, RewardConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Grid,
    Corridor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub grid: GridConfig,
    pub corridor_length: usize,
    pub corridor_cell_px: usize,
    pub policy: Policy,
    pub n_traj: usize,
    pub traj_len: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            kind: EnvKind::Grid,
            grid: GridConfig::default(),
            corridor_length: 6,
            corridor_cell_px: 2,
            policy: Policy::EpsilonGreedyToGoal { epsilon: 0.3 },
            n_traj: 100,
            traj_len: 100,
        }
    }
}

impl EnvSection {
    /// The world with the agent in the top-left cell; starts are drawn per use.
    pub fn world(&self) -> Result<GridWorld> {
        Ok(match self.kind {
            EnvKind::Grid => GridWorld::new(self.grid.clone(), Pos::new(0, 0))?,
            EnvKind::Corridor => {
                GridWorld::corridor(self.corridor_length, self.corridor_cell_px, 0)?
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    RawPixels,
    FrozenRandom,
    InverseDynamics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub feature_map: FeatureKind,
    /// Patch rows and columns for the pixel-space maps.
    pub patch_grid: [usize; 2],
    /// Output width of the frozen random projection.
    pub out_dim: usize,
    pub k: usize,
    pub stack_size: usize,
    pub inverse_dynamics: InverseDynamicsConfig,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            feature_map: FeatureKind::RawPixels,
            patch_grid: [1, 1],
            out_dim: 8,
            k: 25,
            stack_size: 1,
            inverse_dynamics: InverseDynamicsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backend: String,
    pub gamma: f64,
    pub k_max: usize,
    pub ema_decay: f64,
    pub loss_positions: LossPositions,
    pub batch_size: usize,
    pub steps: u64,
    pub sampling: Sampling,
    pub log_every: u64,
    pub tabular: TabularConfig,
    pub neural: NeuralConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            backend: "tabular".into(),
            gamma: t.gamma,
            k_max: t.k_max,
            ema_decay: t.ema_decay,
            loss_positions: t.loss_positions,
            batch_size: t.batch_size,
            steps: 50_000,
            sampling: t.sampling,
            log_every: 1000,
            tabular: t.tabular,
            neural: t.neural,
        }
    }
}

impl ModelSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            k_max: self.k_max,
            batch_size: self.batch_size,
            steps: self.steps,
            ema_decay: self.ema_decay,
            loss_positions: self.loss_positions,
            sampling: self.sampling,
            seed,
            log_every: self.log_every,
            tabular: self.tabular.clone(),
            neural: self.neural.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValuationSection {
    pub n_samples: usize,
    /// Validation trajectories rolled out from each start state.
    pub trajectories_per_state: usize,
    pub horizon: usize,
    pub density_variant: DensityVariant,
}

impl Default for ValuationSection {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            trajectories_per_state: 10,
            horizon: 20,
            density_variant: DensityVariant::Raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferSource {
    Dataset,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub episode_len: usize,
    pub n_episodes: usize,
    pub candidate_buffer_size: usize,
    pub candidates_per_step: usize,
    pub candidate_mode: CandidateMode,
    pub n_value_samples: usize,
    pub methods: Vec<String>,
    pub start: Option<(usize, usize)>,
    pub buffer_source: BufferSource,
}

impl Default for MpcSection {
    fn default() -> Self {
        let m = MpcConfig::default();
        Self {
            episode_len: m.episode_len,
            n_episodes: m.n_episodes,
            candidate_buffer_size: m.candidate_buffer_size,
            candidates_per_step: m.candidates_per_step,
            candidate_mode: m.candidate_mode,
            n_value_samples: m.n_value_samples,
            methods: ["voc", "no-model", "init-model", "no-lookahead"]
                .map(String::from)
                .to_vec(),
            start: m.start,
            buffer_source: BufferSource::Dataset,
        }
    }
}

impl MpcSection {
    pub fn mpc_config(&self, method: &str) -> MpcConfig {
        MpcConfig {
            episode_len: self.episode_len,
            n_episodes: self.n_episodes,
            candidate_buffer_size: self.candidate_buffer_size,
            candidates_per_step: self.candidates_per_step,
            candidate_mode: self.candidate_mode,
            n_value_samples: self.n_value_samples,
            method: method.into(),
            start: self.start,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub reward: RewardConfig,
    pub valuation: ValuationSection,
    pub mpc: MpcSection,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            reward: RewardConfig::default(),
            valuation: ValuationSection::default(),
            mpc: MpcSection::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.env.n_traj == 0 || self.env.traj_len < 2 {
            bail!("env needs n_traj >= 1 and traj_len >= 2");
        }
        if self.tokenizer.k < 2 || self.tokenizer.stack_size == 0 {
            bail!("tokenizer needs k >= 2 and stack_size >= 1");
        }
        if self.valuation.n_samples == 0 || self.valuation.trajectories_per_state == 0 {
            bail!("valuation counts must be at least 1");
        }
        self.model.train_config(self.seed).validate()?;
        for m in &self.mpc.methods {
            self.mpc.mpc_config(m).validate()?;
            if !voc_core::control::scorer_registry().contains(m) {
                bail!("unknown MPC method `{m}`");
            }
        }
        self.env.world()?;
        Ok(())
    }
}
