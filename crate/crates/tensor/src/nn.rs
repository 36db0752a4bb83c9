//! Layers assembled from graph ops. Each layer owns `ParamId`s into a shared
//! [`ParamStore`]; forward passes read the store and record onto a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Activation, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![in_dim, out_dim], std, rng),
            true,
        );
        let bias =
            bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), false));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Re-attach to parameters already present in `store` (after loading a checkpoint).
    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"))?;
        let bias = store.find(&format!("{name}.bias"));
        let (in_dim, out_dim) = store.get(weight).dims2()?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::filled(vec![dim], 1.0),
                false,
            ),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), false),
        }
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: lookup(store, &format!("{name}.gamma"))?,
            beta: lookup(store, &format!("{name}.beta"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.add(
                format!("{name}.table"),
                Tensor::randn(vec![vocab, dim], std, rng),
                true,
            ),
        }
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            table: lookup(store, &format!("{name}.table"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.embedding(t, indices)
    }
}

/// Two linear layers with a nonlinearity in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let s1 = (1.0 / in_dim as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, s1, true, rng),
            out: Linear::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                out_dim,
                s2,
                true,
                rng,
            ),
            activation,
        }
    }

    pub fn bind(store: &ParamStore, name: &str, activation: Activation) -> Result<Self> {
        Ok(Self {
            hidden: Linear::bind(store, &format!("{name}.fc1"))?,
            out: Linear::bind(store, &format!("{name}.fc2"))?,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.activation(h, self.activation);
        self.out.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub context: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            context: 16,
            width: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc: Linear,
    fc_out: Linear,
}

/// Decoder-only pre-norm transformer producing next-token logits.
#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: TransformerConfig,
    tok: Embedding,
    pos: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        cfg: TransformerConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(TensorError::InvalidInput(format!(
                "width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.blocks as f64).sqrt();
        let w = cfg.width;
        let tok = Embedding::new(store, "tok", cfg.vocab, w, std, rng);
        let pos = Embedding::new(store, "pos", cfg.context, w, std, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let p = format!("block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), w),
                q: Linear::new(store, &format!("{p}.q"), w, w, std, true, rng),
                k: Linear::new(store, &format!("{p}.k"), w, w, std, true, rng),
                v: Linear::new(store, &format!("{p}.v"), w, w, std, true, rng),
                proj: Linear::new(store, &format!("{p}.proj"), w, w, resid_std, true, rng),
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), w),
                fc: Linear::new(
                    store,
                    &format!("{p}.fc"),
                    w,
                    w * cfg.mlp_ratio,
                    std,
                    true,
                    rng,
                ),
                fc_out: Linear::new(
                    store,
                    &format!("{p}.fc_out"),
                    w * cfg.mlp_ratio,
                    w,
                    resid_std,
                    true,
                    rng,
                ),
            });
        }
        let ln_f = LayerNorm::new(store, "ln_f", w);
        let head = Linear::new(store, "head", w, cfg.vocab, std, false, rng);
        Ok(Self {
            cfg,
            tok,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn bind(cfg: TransformerConfig, store: &ParamStore) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let p = format!("block{i}");
            blocks.push(Block {
                ln1: LayerNorm::bind(store, &format!("{p}.ln1"))?,
                q: Linear::bind(store, &format!("{p}.q"))?,
                k: Linear::bind(store, &format!("{p}.k"))?,
                v: Linear::bind(store, &format!("{p}.v"))?,
                proj: Linear::bind(store, &format!("{p}.proj"))?,
                ln2: LayerNorm::bind(store, &format!("{p}.ln2"))?,
                fc: Linear::bind(store, &format!("{p}.fc"))?,
                fc_out: Linear::bind(store, &format!("{p}.fc_out"))?,
            });
        }
        Ok(Self {
            cfg,
            tok: Embedding::bind(store, "tok")?,
            pos: Embedding::bind(store, "pos")?,
            blocks,
            ln_f: LayerNorm::bind(store, "ln_f")?,
            head: Linear::bind(store, "head")?,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Logits of shape `[batch * seq_len, vocab]` for a batch of equal-length sequences.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, batch: &[Vec<usize>]) -> Result<Var> {
        let seq_len = batch.first().map_or(0, Vec::len);
        if seq_len == 0 || batch.iter().any(|s| s.len() != seq_len) {
            return Err(TensorError::InvalidInput(
                "transformer batch needs non-empty sequences of equal length".into(),
            ));
        }
        if seq_len > self.cfg.context {
            return Err(TensorError::InvalidInput(format!(
                "sequence length {seq_len} exceeds context {}",
                self.cfg.context
            )));
        }
        let flat: Vec<usize> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq_len).collect();
        let te = self.tok.forward(g, store, &flat)?;
        let pe = self.pos.forward(g, store, &positions)?;
        let mut x = g.add(te, pe)?;
        for b in &self.blocks {
            let h = b.ln1.forward(g, store, x)?;
            let q = b.q.forward(g, store, h)?;
            let k = b.k.forward(g, store, h)?;
            let v = b.v.forward(g, store, h)?;
            let a = g.causal_attention(q, k, v, self.cfg.heads, seq_len)?;
            let a = b.proj.forward(g, store, a)?;
            x = g.add(x, a)?;
            let h = b.ln2.forward(g, store, x)?;
            let h = b.fc.forward(g, store, h)?;
            let h = g.activation(h, Activation::Gelu);
            let h = b.fc_out.forward(g, store, h)?;
            x = g.add(x, h)?;
        }
        let x = self.ln_f.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {name}")))
}
