//! Autoregressive transformer over `[z_t tokens, z_temporal tokens]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voc_tensor::nn::{Transformer, TransformerConfig};
use voc_tensor::{
    checkpoint, log_softmax_at, softmax, AdamW, AdamWConfig, Graph, ParamStore, Schedule,
    TensorError,
};

use super::train::TdModel;
use super::{sample_index, LossPositions, OccupancyModel};
use crate::error::{Result, VocError};
use crate::rng::{rng_for, streams, VocRng};
use crate::tokenizer::{LatentLayout, LatentState};

/// Rows per forward pass when sampling or scoring large batches.
const CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 4,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.05,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NeuralOccupancy {
    layout: LatentLayout,
    gamma: f64,
    cfg: NeuralConfig,
    loss_positions: LossPositions,
    store: ParamStore,
    net: Transformer,
    opt: Option<AdamW>,
    total_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Hyper {
    backend: String,
    gamma: f64,
    layout: LatentLayout,
    config: NeuralConfig,
    loss_positions: LossPositions,
    transformer: TransformerConfig,
}

fn tensor_err(e: TensorError) -> VocError {
    match e {
        TensorError::Divergence(msg) => VocError::Divergence(msg),
        other => VocError::Tensor(other),
    }
}

impl NeuralOccupancy {
    pub fn new(
        layout: LatentLayout,
        gamma: f64,
        cfg: NeuralConfig,
        loss_positions: LossPositions,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(VocError::Config(format!("gamma {gamma} outside [0, 1)")));
        }
        let tcfg = TransformerConfig {
            vocab: layout.vocab,
            context: 2 * layout.latent_len(),
            width: cfg.width,
            heads: cfg.heads,
            blocks: cfg.blocks,
            mlp_ratio: cfg.mlp_ratio,
        };
        let mut store = ParamStore::new();
        let net = Transformer::new(tcfg, &mut store, &mut rng_for(seed, streams::INIT))?;
        Ok(Self {
            layout,
            gamma,
            cfg,
            loss_positions,
            store,
            net,
            opt: None,
            total_steps: 0,
        })
    }

    /// Enables warmup plus cosine decay over `steps` updates.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.total_steps = steps;
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.cfg
    }

    fn sequence(z: &LatentState, e: &LatentState) -> Vec<usize> {
        z.tokens()
            .iter()
            .chain(e.tokens())
            .map(|&t| t as usize)
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, hyper) = checkpoint::load(path)?;
        let h: Hyper = serde_json::from_value(hyper)?;
        if h.backend != "neural" {
            return Err(VocError::Format(format!(
                "checkpoint backend is {}",
                h.backend
            )));
        }
        let net = Transformer::bind(h.transformer, &store)?;
        Ok(Self {
            layout: h.layout,
            gamma: h.gamma,
            cfg: h.config,
            loss_positions: h.loss_positions,
            store,
            net,
            opt: None,
            total_steps: 0,
        })
    }
}

impl OccupancyModel for NeuralOccupancy {
    fn backend(&self) -> &'static str {
        "neural"
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn layout(&self) -> LatentLayout {
        self.layout
    }

    fn sample_batch(&self, conds: &[&LatentState], rng: &mut VocRng) -> Result<Vec<LatentState>> {
        let n_target = self.layout.latent_len();
        let vocab = self.layout.vocab;
        let mut out = Vec::with_capacity(conds.len());
        for chunk in conds.chunks(CHUNK) {
            let mut seqs: Vec<Vec<usize>> = chunk
                .iter()
                .map(|z| {
                    self.layout.check(z)?;
                    Ok(z.tokens().iter().map(|&t| t as usize).collect())
                })
                .collect::<Result<_>>()?;
            for _ in 0..n_target {
                let len = seqs[0].len();
                let mut g = Graph::new();
                let logits = self.net.logits(&mut g, &self.store, &seqs)?;
                let data = g.value(logits).data();
                for (b, seq) in seqs.iter_mut().enumerate() {
                    let row = &data[(b * len + len - 1) * vocab..][..vocab];
                    seq.push(sample_index(&softmax(row), rng));
                }
            }
            for seq in seqs {
                let tokens = seq[n_target..].iter().map(|&t| t as u16).collect();
                out.push(LatentState::new(tokens, self.layout.tokens_per_frame)?);
            }
        }
        Ok(out)
    }

    fn log_density(&self, z: &LatentState, z_e: &LatentState) -> Result<f64> {
        Ok(self.log_density_batch(&[(z, z_e)])?[0])
    }

    /// Chain rule over target positions, one forward pass per chunk.
    fn log_density_batch(&self, pairs: &[(&LatentState, &LatentState)]) -> Result<Vec<f64>> {
        let c = self.layout.latent_len();
        let vocab = self.layout.vocab;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(CHUNK) {
            let mut seqs = Vec::with_capacity(chunk.len());
            for (z, e) in chunk {
                self.layout.check(z)?;
                self.layout.check(e)?;
                seqs.push(Self::sequence(z, e));
            }
            let inputs: Vec<Vec<usize>> = seqs.iter().map(|s| s[..2 * c - 1].to_vec()).collect();
            let len = 2 * c - 1;
            let mut g = Graph::new();
            let logits = self.net.logits(&mut g, &self.store, &inputs)?;
            let data = g.value(logits).data();
            for (b, seq) in seqs.iter().enumerate() {
                let lp: f64 = (c..2 * c)
                    .map(|j| log_softmax_at(&data[(b * len + j - 1) * vocab..][..vocab], seq[j]))
                    .sum();
                out.push(lp);
            }
        }
        Ok(out)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let hyper = Hyper {
            backend: "neural".into(),
            gamma: self.gamma,
            layout: self.layout,
            config: self.cfg.clone(),
            loss_positions: self.loss_positions,
            transformer: *self.net.config(),
        };
        checkpoint::save(path, &self.store, serde_json::to_value(hyper)?)?;
        Ok(())
    }
}

impl TdModel for NeuralOccupancy {
    fn td_update(
        &mut self,
        conds: &[&LatentState],
        targets: &[&LatentState],
    ) -> Result<(f64, f64)> {
        let c = self.layout.latent_len();
        let mut inputs = Vec::with_capacity(conds.len());
        let mut labels = Vec::with_capacity(conds.len() * (2 * c - 1));
        for (z, e) in conds.iter().zip(targets) {
            self.layout.check(z)?;
            self.layout.check(e)?;
            let seq = Self::sequence(z, e);
            for i in 0..2 * c - 1 {
                let scored = i + 1 >= c || self.loss_positions == LossPositions::AllPositions;
                labels.push(scored.then_some(seq[i + 1]));
            }
            inputs.push(seq[..2 * c - 1].to_vec());
        }
        let mut g = Graph::new();
        let logits = self.net.logits(&mut g, &self.store, &inputs)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let value = g.value(loss).data()[0];
        if value.is_nan() {
            return Err(VocError::Divergence("NaN cross-entropy".into()));
        }
        let grads = g.backward(loss)?;
        if self.opt.is_none() {
            let adam = AdamWConfig {
                lr: self.cfg.lr,
                weight_decay: self.cfg.weight_decay,
                max_grad_norm: self.cfg.max_grad_norm,
                ..AdamWConfig::default()
            };
            let schedule = (self.total_steps > 0)
                .then(|| Schedule::new(self.cfg.warmup_steps, self.total_steps));
            self.opt = Some(AdamW::new(adam, schedule, &self.store));
        }
        let opt = self.opt.as_mut().expect("optimizer initialized above");
        let lr = opt.step(&mut self.store, &grads).map_err(tensor_err)?;
        Ok((value, lr))
    }

    fn ema_toward(&mut self, online: &Self, rho: f64) -> Result<()> {
        self.store.ema_toward(&online.store, rho)?;
        Ok(())
    }
}
