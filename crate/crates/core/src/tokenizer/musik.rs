//! Inverse-dynamics encoder: features trained so that the action at `t` is
//! predictable from the features of `o_t` and `o_{t+k}`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use voc_tensor::nn::Mlp;
use voc_tensor::{
    checkpoint, Activation, AdamW, AdamWConfig, CurvePoint, Graph, ParamStore, Tensor,
};

use crate::env::{Frame, Trajectory, NUM_ACTIONS};
use crate::error::{Result, VocError};
use crate::rng::{rng_for, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseDynamicsConfig {
    pub tokens_per_frame: usize,
    pub segment_dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub k_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for InverseDynamicsConfig {
    fn default() -> Self {
        Self {
            tokens_per_frame: 4,
            segment_dim: 4,
            hidden: 64,
            head_hidden: 64,
            k_max: 5,
            epochs: 30,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 0.0,
        }
    }
}

impl InverseDynamicsConfig {
    pub fn feature_dim(&self) -> usize {
        self.tokens_per_frame * self.segment_dim
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.tokens_per_frame,
            self.segment_dim,
            self.hidden,
            self.head_hidden,
            self.k_max,
            self.batch_size,
        ];
        if positive.contains(&0) || !(self.lr > 0.0) {
            return Err(VocError::Config(format!(
                "invalid inverse-dynamics config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InverseDynamicsEncoder {
    cfg: InverseDynamicsConfig,
    frame_shape: [usize; 3],
    store: ParamStore,
    encoder: Mlp,
    head: Mlp,
}

fn pixels(frame: &Frame) -> Vec<f64> {
    frame.pixels.iter().map(|&p| p as f64 / 255.0).collect()
}

impl InverseDynamicsEncoder {
    pub fn new(cfg: InverseDynamicsConfig, frame_shape: [usize; 3], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n_in: usize = frame_shape.iter().product();
        let mut rng = rng_for(seed, streams::INIT);
        let mut store = ParamStore::new();
        let encoder = Mlp::new(
            &mut store,
            "enc",
            n_in,
            cfg.hidden,
            cfg.feature_dim(),
            Activation::Tanh,
            &mut rng,
        );
        let head = Mlp::new(
            &mut store,
            "head",
            2 * cfg.feature_dim(),
            cfg.head_hidden,
            NUM_ACTIONS,
            Activation::Relu,
            &mut rng,
        );
        Ok(Self {
            cfg,
            frame_shape,
            store,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &InverseDynamicsConfig {
        &self.cfg
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        self.frame_shape
    }

    fn check(&self, frame: &Frame) -> Result<()> {
        let (h, w, c) = frame.shape();
        if [h, w, c] != self.frame_shape {
            return Err(VocError::InvalidInput(format!(
                "frame {h}x{w}x{c} does not match encoder input {:?}",
                self.frame_shape
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, frames: &[&Frame]) -> Result<voc_tensor::Var> {
        let mut data = Vec::new();
        for f in frames {
            self.check(f)?;
            data.extend(pixels(f));
        }
        let n_in: usize = self.frame_shape.iter().product();
        let x = g.input(Tensor::new(vec![frames.len(), n_in], data)?);
        let h = self.encoder.forward(g, &self.store, x)?;
        Ok(g.activation(h, Activation::Tanh))
    }

    /// Feature vector of one frame, `L·D` values in (-1, 1).
    pub fn features(&self, frame: &Frame) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let phi = self.embed(&mut g, &[frame])?;
        Ok(g.value(phi).data().to_vec())
    }

    fn logits(&self, g: &mut Graph, now: &[&Frame], later: &[&Frame]) -> Result<voc_tensor::Var> {
        let a = self.embed(g, now)?;
        let b = self.embed(g, later)?;
        let ab = g.concat(a, b)?;
        Ok(self.head.forward(g, &self.store, ab)?)
    }

    /// Most likely action for each `(o_t, o_{t+k})` pair; ties go to the lowest action.
    pub fn predict(&self, now: &[&Frame], later: &[&Frame]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, now, later)?;
        Ok(g.value(logits)
            .data()
            .chunks(NUM_ACTIONS)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                    )
                    .0
            })
            .collect())
    }

    /// Accuracy over every `(t, k)` pair with `1 ≤ k ≤ k_max`.
    pub fn action_accuracy(&self, trajectories: &[Trajectory], k_max: usize) -> Result<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        for traj in trajectories {
            for k in 1..=k_max {
                let n = traj.actions.len().saturating_sub(k - 1);
                if n == 0 {
                    continue;
                }
                let now: Vec<&Frame> = (0..n).map(|t| &traj.frames[t]).collect();
                let later: Vec<&Frame> = (0..n).map(|t| &traj.frames[t + k]).collect();
                let pred = self.predict(&now, &later)?;
                hits += pred
                    .iter()
                    .zip(&traj.actions)
                    .filter(|(p, a)| p == a)
                    .count();
                total += n;
            }
        }
        if total == 0 {
            return Err(VocError::UnsupportedDataset(
                "no action-labelled transitions".into(),
            ));
        }
        Ok(hits as f64 / total as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hyper = serde_json::json!({ "config": self.cfg, "frame_shape": self.frame_shape });
        checkpoint::save(path, &self.store, hyper)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, hyper) = checkpoint::load(path)?;
        let cfg: InverseDynamicsConfig = serde_json::from_value(hyper["config"].clone())?;
        let frame_shape: [usize; 3] = serde_json::from_value(hyper["frame_shape"].clone())?;
        let encoder = Mlp::bind(&store, "enc", Activation::Tanh)?;
        let head = Mlp::bind(&store, "head", Activation::Relu)?;
        Ok(Self {
            cfg,
            frame_shape,
            store,
            encoder,
            head,
        })
    }
}

pub struct InverseDynamicsTraining {
    pub encoder: InverseDynamicsEncoder,
    /// One point per epoch: mean minibatch loss. Step 0 is the loss before any update.
    pub curve: Vec<CurvePoint>,
}

pub fn train_inverse_dynamics(
    trajectories: &[Trajectory],
    cfg: &InverseDynamicsConfig,
    seed: u64,
) -> Result<InverseDynamicsTraining> {
    let transitions: Vec<(usize, usize)> = trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, tr)| (0..tr.actions.len()).map(move |t| (i, t)))
        .collect();
    if transitions.is_empty() {
        return Err(VocError::UnsupportedDataset(
            "inverse dynamics needs trajectories with actions".into(),
        ));
    }
    let (h, w, c) = trajectories[0].frames[0].shape();
    let mut model = InverseDynamicsEncoder::new(cfg.clone(), [h, w, c], seed)?;
    let adam_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        max_grad_norm: Some(1.0),
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adam_cfg, None, &model.store);
    let mut rng = rng_for(seed, streams::TRAINING);
    let mut order = transitions.clone();
    let mut curve = Vec::with_capacity(cfg.epochs + 1);

    for epoch in 0..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut now = Vec::with_capacity(chunk.len());
            let mut later = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &(i, t) in chunk {
                let tr = &trajectories[i];
                let k = rng.random_range(1..=cfg.k_max).min(tr.actions.len() - t);
                now.push(&tr.frames[t]);
                later.push(&tr.frames[t + k]);
                targets.push(Some(tr.actions[t]));
            }
            let mut g = Graph::new();
            let logits = model.logits(&mut g, &now, &later)?;
            let loss = g.cross_entropy(logits, &targets)?;
            loss_sum += g.value(loss).data()[0];
            batches += 1;
            // epoch 0 only measures the untrained loss
            if epoch > 0 {
                let grads = g.backward(loss)?;
                opt.step(&mut model.store, &grads)?;
            }
        }
        curve.push(CurvePoint {
            step: epoch as u64,
            loss: loss_sum / batches as f64,
            lr: if epoch == 0 { 0.0 } else { cfg.lr },
        });
    }
    Ok(InverseDynamicsTraining {
        encoder: model,
        curve,
    })
}
