//! Reward models over pre-discretization features and the two value
//! estimators built on an occupancy model.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use voc_tensor::nn::{Linear, Mlp};
use voc_tensor::{
    checkpoint, Activation, AdamW, AdamWConfig, CurvePoint, Graph, ParamStore, Schedule, Tensor,
    Var,
};

use crate::env::Trajectory;
use crate::error::{Result, VocError};
use crate::occupancy::OccupancyModel;
use crate::rng::{rng_for, streams, VocRng};
use crate::tokenizer::{LatentState, Tokenizer};

pub const REWARD_FORMAT: &str = "voc-reward-model";

/// Scalar reward of a latent state.
pub trait LatentReward: Send + Sync {
    fn reward(&self, z: &LatentState) -> Result<f64>;

    fn rewards(&self, zs: &[LatentState]) -> Result<Vec<f64>> {
        zs.iter().map(|z| self.reward(z)).collect()
    }
}

/// Exact rewards for an enumerated set of latents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TableReward {
    table: BTreeMap<LatentState, f64>,
}

impl TableReward {
    pub fn new(table: BTreeMap<LatentState, f64>) -> Self {
        Self { table }
    }

    /// `r[s]` for the single-token state latents of a finite chain.
    pub fn states(r: &[f64]) -> Self {
        Self::new(
            r.iter()
                .enumerate()
                .map(|(s, &v)| (crate::occupancy::state_latent(s), v))
                .collect(),
        )
    }
}

impl LatentReward for TableReward {
    fn reward(&self, z: &LatentState) -> Result<f64> {
        self.table.get(z).copied().ok_or_else(|| {
            VocError::InvalidInput(format!("no reward entry for latent {:?}", z.tokens()))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Hidden width of the 2-layer network; 0 gives a linear model.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Trailing share of trajectories held out for validation.
    pub validation_fraction: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 40,
            batch_size: 64,
            lr: 3e-3,
            validation_fraction: 0.2,
        }
    }
}

impl RewardConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.validation_fraction)
        {
            return Err(VocError::Config(format!("invalid reward config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Net {
    Linear(Linear),
    Mlp(Mlp),
}

/// `r(φ)` on the concatenated pre-discretization features of a frame stack.
#[derive(Clone, Debug)]
pub struct RewardModel {
    cfg: RewardConfig,
    input_dim: usize,
    store: ParamStore,
    net: Net,
}

impl RewardModel {
    pub fn new(cfg: RewardConfig, input_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, streams::INIT);
        let mut store = ParamStore::new();
        let net = if cfg.hidden == 0 {
            Net::Linear(Linear::new(
                &mut store,
                "reward",
                input_dim,
                1,
                (input_dim as f64).powf(-0.5),
                true,
                &mut rng,
            ))
        } else {
            Net::Mlp(Mlp::new(
                &mut store,
                "reward",
                input_dim,
                cfg.hidden,
                1,
                Activation::Relu,
                &mut rng,
            ))
        };
        Ok(Self {
            cfg,
            input_dim,
            store,
            net,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn config(&self) -> &RewardConfig {
        &self.cfg
    }

    fn forward(&self, g: &mut Graph, xs: &[&[f64]]) -> Result<Var> {
        let mut data = Vec::with_capacity(xs.len() * self.input_dim);
        for x in xs {
            if x.len() != self.input_dim {
                return Err(VocError::InvalidInput(format!(
                    "reward input of {} values, model expects {}",
                    x.len(),
                    self.input_dim
                )));
            }
            data.extend_from_slice(x);
        }
        let x = g.input(Tensor::new(vec![xs.len(), self.input_dim], data)?);
        Ok(match &self.net {
            Net::Linear(l) => l.forward(g, &self.store, x)?,
            Net::Mlp(m) => m.forward(g, &self.store, x)?,
        })
    }

    pub fn predict(&self, xs: &[&[f64]]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let y = self.forward(&mut g, xs)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn mse(&self, xs: &[&[f64]], ys: &[f64]) -> Result<f64> {
        if xs.is_empty() {
            return Err(VocError::InvalidInput("mse over no examples".into()));
        }
        let p = self.predict(xs)?;
        Ok(p.iter()
            .zip(ys)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / ys.len() as f64)
    }

    /// Rewards of latents through `tok`'s centroids.
    pub fn on_latents(&self, tok: &Tokenizer) -> DecodedReward {
        DecodedReward {
            model: self.clone(),
            tok: tok.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hyper = serde_json::json!({
            "format": REWARD_FORMAT,
            "config": self.cfg,
            "input_dim": self.input_dim,
        });
        checkpoint::save(path, &self.store, hyper)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, hyper) = checkpoint::load(path)?;
        if hyper["format"] != REWARD_FORMAT {
            return Err(VocError::Format(format!(
                "{} is not a reward model checkpoint",
                path.display()
            )));
        }
        let cfg: RewardConfig = serde_json::from_value(hyper["config"].clone())?;
        let input_dim: usize = serde_json::from_value(hyper["input_dim"].clone())?;
        let net = if cfg.hidden == 0 {
            Net::Linear(Linear::bind(&store, "reward")?)
        } else {
            Net::Mlp(Mlp::bind(&store, "reward", Activation::Relu)?)
        };
        Ok(Self {
            cfg,
            input_dim,
            store,
            net,
        })
    }
}

/// A [`RewardModel`] read through a tokenizer: each latent is replaced by
/// the concatenated centroids of its tokens.
#[derive(Clone, Debug)]
pub struct DecodedReward {
    model: RewardModel,
    tok: Tokenizer,
}

impl LatentReward for DecodedReward {
    fn reward(&self, z: &LatentState) -> Result<f64> {
        Ok(self.rewards(std::slice::from_ref(z))?[0])
    }

    fn rewards(&self, zs: &[LatentState]) -> Result<Vec<f64>> {
        let feats: Vec<Vec<f64>> = zs
            .iter()
            .map(|z| {
                self.tok.layout().check(z)?;
                self.tok.centroid_features(z.tokens())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        self.model.predict(&refs)
    }
}

pub struct RewardTraining {
    pub model: RewardModel,
    pub train_mse: f64,
    /// `None` when the dataset is too small to hold any trajectory out.
    pub validation_mse: Option<f64>,
    /// Training MSE per epoch; step 0 is before any update. The learning rate
    /// decays along a cosine over all epochs.
    pub curve: Vec<CurvePoint>,
}

/// Regresses `r_t` on the features of the frame stack ending at `t + 1`, the
/// state the reward was paid on arrival in.
pub fn train_reward(
    dataset: &[Trajectory],
    tokenizer: &Tokenizer,
    cfg: &RewardConfig,
    seed: u64,
) -> Result<RewardTraining> {
    cfg.validate()?;
    let mut examples: Vec<Vec<(Vec<f64>, f64)>> = Vec::with_capacity(dataset.len());
    for tr in dataset {
        let feats = tokenizer.trajectory_features(&tr.frames)?;
        examples.push(
            tr.rewards
                .iter()
                .enumerate()
                .map(|(t, &r)| (feats[t + 1].clone(), r))
                .collect(),
        );
    }
    if examples.iter().all(Vec::is_empty) {
        return Err(VocError::UnsupportedDataset(
            "no reward-labelled transitions".into(),
        ));
    }
    let n_val = ((dataset.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = if n_val >= dataset.len() { 0 } else { n_val };
    let (train_part, val_part) = examples.split_at(dataset.len() - n_val);
    let train: Vec<&(Vec<f64>, f64)> = train_part.iter().flatten().collect();
    let val: Vec<&(Vec<f64>, f64)> = val_part.iter().flatten().collect();
    if train.is_empty() {
        return Err(VocError::UnsupportedDataset(
            "no reward-labelled training transitions".into(),
        ));
    }
    let dim = train[0].0.len();
    let mut model = RewardModel::new(cfg.clone(), dim, seed)?;
    let adam_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        max_grad_norm: Some(1.0),
        ..AdamWConfig::default()
    };
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)) as u64;
    let mut opt = AdamW::new(adam_cfg, Some(Schedule::new(0, total_steps)), &model.store);
    let mut rng = rng_for(seed, streams::TRAINING);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let split = |set: &[&(Vec<f64>, f64)]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            set.iter().map(|e| e.0.clone()).collect(),
            set.iter().map(|e| e.1).collect(),
        )
    };
    let (train_x, train_y) = split(&train);
    let train_refs: Vec<&[f64]> = train_x.iter().map(Vec::as_slice).collect();
    let mut curve = vec![CurvePoint {
        step: 0,
        loss: model.mse(&train_refs, &train_y)?,
        lr: 0.0,
    }];
    for epoch in 1..=cfg.epochs {
        let lr = opt.next_lr();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| train_refs[i]).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut g = Graph::new();
            let pred = model.forward(&mut g, &xs)?;
            let loss = g.mse(pred, &ys)?;
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, &grads)?;
        }
        curve.push(CurvePoint {
            step: epoch as u64,
            loss: model.mse(&train_refs, &train_y)?,
            lr,
        });
    }
    let train_mse = curve.last().expect("curve starts with step 0").loss;
    let validation_mse = if val.is_empty() {
        None
    } else {
        let (vx, vy) = split(&val);
        let refs: Vec<&[f64]> = vx.iter().map(Vec::as_slice).collect();
        Some(model.mse(&refs, &vy)?)
    };
    Ok(RewardTraining {
        model,
        train_mse,
        validation_mse,
        curve,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sampling,
    Density,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    /// Samples drawn (sampling) or horizon summed over (density).
    pub count: usize,
    pub method: Method,
    /// Reward of each sample (sampling) or each summed term, unscaled.
    pub per_sample: Vec<f64>,
    /// Density terms whose latent had zero model probability and so added nothing.
    pub zero_density_terms: usize,
}

/// `V(z) ≈ 1/(1−γ) · mean_i r(z_e^i)` over `n` futures sampled from `model`.
pub fn value_by_sampling(
    model: &dyn OccupancyModel,
    reward: &dyn LatentReward,
    z: &LatentState,
    n: usize,
    rng: &mut VocRng,
) -> Result<ValueEstimate> {
    if n == 0 {
        return Err(VocError::InvalidInput(
            "value_by_sampling needs at least one sample".into(),
        ));
    }
    let futures = model.sample_future(z, n, rng)?;
    let per_sample = reward.rewards(&futures)?;
    let mean = per_sample.iter().sum::<f64>() / n as f64 / (1.0 - model.gamma());
    Ok(ValueEstimate {
        mean,
        count: n,
        method: Method::Sampling,
        per_sample,
        zero_density_terms: 0,
    })
}

/// Which trajectory latents enter the density-weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityVariant {
    /// Every timestep, so a latent visited twice counts twice.
    #[default]
    Raw,
    /// Each distinct latent once, at its first visit.
    DedupVisits,
}

/// `Σ_{t<T} M(z_t | z_0) · r(z_t)` over `futures[..horizon]`, where
/// `futures[t]` is the latent `t + 1` steps after `z_0`. The sum carries no
/// `1/(1−γ)`: it is the occupancy-weighted reward, not scaled to a value.
pub fn value_by_density(
    model: &dyn OccupancyModel,
    reward: &dyn LatentReward,
    z0: &LatentState,
    futures: &[LatentState],
    horizon: usize,
    variant: DensityVariant,
) -> Result<ValueEstimate> {
    if futures.len() < horizon {
        return Err(VocError::InvalidInput(format!(
            "horizon {horizon} exceeds the {} latents of the validation trajectory",
            futures.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let terms: Vec<&LatentState> = futures[..horizon]
        .iter()
        .filter(|z| variant == DensityVariant::Raw || seen.insert(*z))
        .collect();
    let pairs: Vec<(&LatentState, &LatentState)> = terms.iter().map(|z| (z0, *z)).collect();
    let log_p = model.log_density_batch(&pairs)?;
    let owned: Vec<LatentState> = terms.iter().map(|z| (*z).clone()).collect();
    let r = reward.rewards(&owned)?;
    let mut zero = 0;
    let mut per_sample = Vec::with_capacity(terms.len());
    for (lp, r) in log_p.iter().zip(&r) {
        if *lp == f64::NEG_INFINITY {
            zero += 1;
            per_sample.push(0.0);
        } else {
            per_sample.push(lp.exp() * r);
        }
    }
    Ok(ValueEstimate {
        mean: per_sample.iter().sum(),
        count: horizon,
        method: Method::Density,
        per_sample,
        zero_density_terms: zero,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateError {
    pub state_id: usize,
    pub estimate: f64,
    pub oracle: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSummary {
    pub per_state: Vec<StateError>,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
}

pub fn return_estimation_error(
    state_ids: &[usize],
    estimates: &[f64],
    oracle: &[f64],
) -> Result<ErrorSummary> {
    if state_ids.len() != estimates.len() || estimates.len() != oracle.len() || estimates.is_empty()
    {
        return Err(VocError::InvalidInput(format!(
            "misaligned estimates: {} ids, {} estimates, {} oracle values",
            state_ids.len(),
            estimates.len(),
            oracle.len()
        )));
    }
    let per_state: Vec<StateError> = state_ids
        .iter()
        .zip(estimates.iter().zip(oracle))
        .map(|(&state_id, (&estimate, &oracle))| StateError {
            state_id,
            estimate,
            oracle,
            abs_error: (estimate - oracle).abs(),
        })
        .collect();
    let mean_abs_error =
        per_state.iter().map(|e| e.abs_error).sum::<f64>() / per_state.len() as f64;
    let max_abs_error = per_state.iter().map(|e| e.abs_error).fold(0.0, f64::max);
    Ok(ErrorSummary {
        per_state,
        mean_abs_error,
        max_abs_error,
    })
}

pub fn write_error_csv<W: Write>(mut w: W, summary: &ErrorSummary) -> Result<()> {
    writeln!(w, "state_id,estimate,oracle,abs_error")?;
    for e in &summary.per_state {
        writeln!(
            w,
            "{},{:.10},{:.10},{:.10}",
            e.state_id, e.estimate, e.oracle, e.abs_error
        )?;
    }
    Ok(())
}

/// `state_id,sample_index,reward` rows of each estimate's per-sample rewards.
pub fn write_return_distribution_csv<W: Write>(
    mut w: W,
    estimates: &[(usize, &ValueEstimate)],
) -> Result<()> {
    writeln!(w, "state_id,sample_index,reward")?;
    for (s, est) in estimates {
        for (i, r) in est.per_sample.iter().enumerate() {
            writeln!(w, "{s},{i},{r:.10}")?;
        }
    }
    Ok(())
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(VocError::InvalidInput(
            "spearman needs two aligned series of length >= 2".into(),
        ));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return Err(VocError::InvalidInput(
            "spearman of a constant series".into(),
        ));
    }
    Ok(num / (da * db).sqrt())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
