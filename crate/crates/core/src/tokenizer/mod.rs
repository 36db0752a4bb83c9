//! Frames to discrete tokens: a feature map cuts each frame into `L`
//! segments, a codebook quantizes each segment, and `stack_size` consecutive
//! frames form one latent state.

mod codebook;
mod features;
mod kmeans;
mod musik;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use codebook::{fit_codebook, Codebook, CODEBOOK_VERSION};
pub use features::{
    build_feature_map, feature_map_registry, FeatureContext, FeatureMap, FeatureMapSpec,
    FrozenRandom, InverseDynamicsFeatures, RawPixels,
};
pub use kmeans::{kmeans, nearest, KMeans};
pub use musik::{
    train_inverse_dynamics, InverseDynamicsConfig, InverseDynamicsEncoder, InverseDynamicsTraining,
};

use crate::env::Frame;
use crate::error::{Result, VocError};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<u16>,
    tokens_per_frame: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u16>, tokens_per_frame: usize) -> Result<Self> {
        if tokens_per_frame == 0 || tokens.len() % tokens_per_frame != 0 {
            return Err(VocError::InvalidInput(format!(
                "{} tokens is not a whole number of {tokens_per_frame}-token frames",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            tokens_per_frame,
        })
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn n_frames(&self) -> usize {
        self.tokens.len() / self.tokens_per_frame
    }

    pub fn frame(&self, i: usize) -> &[u16] {
        &self.tokens[i * self.tokens_per_frame..(i + 1) * self.tokens_per_frame]
    }
}

/// Tokens of `stack_size` consecutive frames, oldest first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatentState {
    seq: TokenSeq,
}

impl LatentState {
    pub fn new(tokens: Vec<u16>, tokens_per_frame: usize) -> Result<Self> {
        let seq = TokenSeq::new(tokens, tokens_per_frame)?;
        if seq.n_frames() == 0 {
            return Err(VocError::InvalidInput(
                "latent state needs at least one frame".into(),
            ));
        }
        Ok(Self { seq })
    }

    pub fn token_seq(&self) -> &TokenSeq {
        &self.seq
    }

    pub fn tokens(&self) -> &[u16] {
        self.seq.tokens()
    }

    pub fn stack_size(&self) -> usize {
        self.seq.n_frames()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.seq.tokens_per_frame
    }

    /// Tokens of the newest frame.
    pub fn last_frame(&self) -> &[u16] {
        self.seq.frame(self.stack_size() - 1)
    }
}

/// Shape of the latent token sequences a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub vocab: usize,
    pub tokens_per_frame: usize,
    pub stack_size: usize,
}

impl LatentLayout {
    /// One token per latent, one token per state: finite chains used directly.
    pub fn states(n: usize) -> Self {
        Self {
            vocab: n,
            tokens_per_frame: 1,
            stack_size: 1,
        }
    }

    pub fn latent_len(&self) -> usize {
        self.tokens_per_frame * self.stack_size
    }

    pub fn check(&self, z: &LatentState) -> Result<()> {
        if z.tokens().len() != self.latent_len() || z.tokens_per_frame() != self.tokens_per_frame {
            return Err(VocError::InvalidInput(format!(
                "latent of {} tokens for layout {self:?}",
                z.tokens().len()
            )));
        }
        if let Some(t) = z.tokens().iter().find(|t| **t as usize >= self.vocab) {
            return Err(VocError::InvalidInput(format!(
                "token {t} >= vocab {}",
                self.vocab
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reconstruction {
    Frames(Vec<Frame>),
    /// Centroid feature vectors per frame; not viewable as images.
    Features(Vec<Vec<f64>>),
}

impl Reconstruction {
    pub fn is_visual(&self) -> bool {
        matches!(self, Reconstruction::Frames(_))
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    codebook: Codebook,
    features: Arc<dyn FeatureMap>,
    stack_size: usize,
}

impl Tokenizer {
    pub fn new(
        codebook: Codebook,
        features: Arc<dyn FeatureMap>,
        stack_size: usize,
    ) -> Result<Self> {
        if stack_size == 0 {
            return Err(VocError::Config("stack_size must be at least 1".into()));
        }
        if codebook.dim() != features.segment_dim()
            || codebook.feature_map().name() != features.spec().name()
        {
            return Err(VocError::Config(format!(
                "codebook ({}, D={}) does not match feature map ({}, D={})",
                codebook.feature_map().name(),
                codebook.dim(),
                features.spec().name(),
                features.segment_dim()
            )));
        }
        Ok(Self {
            codebook,
            features,
            stack_size,
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn feature_map(&self) -> &Arc<dyn FeatureMap> {
        &self.features
    }

    pub fn stack_size(&self) -> usize {
        self.stack_size
    }

    pub fn layout(&self) -> LatentLayout {
        LatentLayout {
            vocab: self.codebook.k(),
            tokens_per_frame: self.features.tokens_per_frame(),
            stack_size: self.stack_size,
        }
    }

    /// Pre-quantization features of one frame, `L·D` values.
    pub fn feature_reward_vector(&self, frame: &Frame) -> Result<Vec<f64>> {
        self.features.features(frame)
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<Vec<u16>> {
        let x = self.features.features(frame)?;
        x.chunks(self.codebook.dim())
            .map(|seg| self.codebook.quantize(seg).map(|(t, _)| t))
            .collect()
    }

    /// Encodes exactly `stack_size` frames, oldest first.
    pub fn encode(&self, frames: &[&Frame]) -> Result<LatentState> {
        if frames.len() != self.stack_size {
            return Err(VocError::InvalidInput(format!(
                "encode needs {} frames, got {}",
                self.stack_size,
                frames.len()
            )));
        }
        let mut tokens = Vec::with_capacity(self.layout().latent_len());
        for f in frames {
            tokens.extend(self.encode_frame(f)?);
        }
        LatentState::new(tokens, self.features.tokens_per_frame())
    }

    /// Latent for the newest frame of `history`; missing older frames repeat
    /// the oldest one available.
    pub fn latent_from_history(&self, history: &[Frame]) -> Result<LatentState> {
        let n = history.len();
        if n == 0 {
            return Err(VocError::InvalidInput("empty frame history".into()));
        }
        let window: Vec<&Frame> = (0..self.stack_size)
            .map(|i| &history[(n + i).saturating_sub(self.stack_size)])
            .collect();
        self.encode(&window)
    }

    /// One latent per frame, padded at the start like [`Self::latent_from_history`].
    pub fn trajectory_latents(&self, frames: &[Frame]) -> Result<Vec<LatentState>> {
        let per_frame: Vec<Vec<u16>> = frames
            .iter()
            .map(|f| self.encode_frame(f))
            .collect::<Result<_>>()?;
        (0..frames.len())
            .map(|t| {
                let tokens = (0..self.stack_size)
                    .flat_map(|i| {
                        per_frame[(t + 1 + i).saturating_sub(self.stack_size)]
                            .iter()
                            .copied()
                    })
                    .collect();
                LatentState::new(tokens, self.features.tokens_per_frame())
            })
            .collect()
    }

    /// Pre-discretization features of each frame's stack, padded like
    /// [`Self::trajectory_latents`]: entry `t` matches latent `t`.
    pub fn trajectory_features(&self, frames: &[Frame]) -> Result<Vec<Vec<f64>>> {
        let per_frame: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| self.features.features(f))
            .collect::<Result<_>>()?;
        Ok((0..frames.len())
            .map(|t| {
                (0..self.stack_size)
                    .flat_map(|i| {
                        per_frame[(t + 1 + i).saturating_sub(self.stack_size)]
                            .iter()
                            .copied()
                    })
                    .collect()
            })
            .collect())
    }

    /// Concatenated centroid vectors of `tokens`.
    pub fn centroid_features(&self, tokens: &[u16]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(tokens.len() * self.codebook.dim());
        for &t in tokens {
            out.extend_from_slice(self.codebook.centroid(t)?);
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentState) -> Result<Reconstruction> {
        self.layout().check(z)?;
        let l = self.features.tokens_per_frame();
        let mut frames = Vec::with_capacity(z.stack_size());
        let mut feats = Vec::with_capacity(z.stack_size());
        for i in 0..z.stack_size() {
            let toks = z.token_seq().frame(i);
            let segments: Vec<&[f64]> = toks
                .iter()
                .map(|t| self.codebook.centroid(*t))
                .collect::<Result<_>>()?;
            debug_assert_eq!(segments.len(), l);
            match self.features.reassemble(&segments) {
                Some(f) => frames.push(f),
                None => feats.push(segments.concat()),
            }
        }
        Ok(if feats.is_empty() {
            Reconstruction::Frames(frames)
        } else {
            Reconstruction::Features(feats)
        })
    }

    /// Mean over segments of the squared distance to the assigned centroid,
    /// divided by `D`.
    pub fn quantization_mse(&self, frames: &[Frame]) -> Result<f64> {
        let d = self.codebook.dim();
        let (mut sum, mut n) = (0.0, 0usize);
        for f in frames {
            for seg in self.features.features(f)?.chunks(d) {
                sum += self.codebook.quantize(seg)?.1;
                n += 1;
            }
        }
        if n == 0 {
            return Err(VocError::InvalidInput("no frames".into()));
        }
        Ok(sum / (n * d) as f64)
    }
}
