//! Per-frame feature maps. Every map turns a frame into `L` segments of `D`
//! values; the codebook quantizes each segment to one token.

use std::sync::{Arc, LazyLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::musik::InverseDynamicsEncoder;
use crate::env::Frame;
use crate::error::{Result, VocError};
use crate::registry::Registry;
use crate::rng::{rng_for, streams};

/// Serializable description of a feature map, stored in the codebook header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureMapSpec {
    RawPixels {
        frame_shape: [usize; 3],
        patch_grid: [usize; 2],
    },
    FrozenRandom {
        frame_shape: [usize; 3],
        patch_grid: [usize; 2],
        out_dim: usize,
        seed: u64,
    },
    InverseDynamics {
        frame_shape: [usize; 3],
        tokens_per_frame: usize,
        segment_dim: usize,
        /// Encoder checkpoint file name, relative to the codebook file.
        encoder: String,
    },
}

impl FeatureMapSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureMapSpec::RawPixels { .. } => "raw-pixels",
            FeatureMapSpec::FrozenRandom { .. } => "frozen-random",
            FeatureMapSpec::InverseDynamics { .. } => "inverse-dynamics",
        }
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        match self {
            FeatureMapSpec::RawPixels { frame_shape, .. }
            | FeatureMapSpec::FrozenRandom { frame_shape, .. }
            | FeatureMapSpec::InverseDynamics { frame_shape, .. } => *frame_shape,
        }
    }

    /// Patch rows and columns; the inverse-dynamics map reports `(1, L)`.
    pub fn patch_grid(&self) -> [usize; 2] {
        match self {
            FeatureMapSpec::RawPixels { patch_grid, .. }
            | FeatureMapSpec::FrozenRandom { patch_grid, .. } => *patch_grid,
            FeatureMapSpec::InverseDynamics {
                tokens_per_frame, ..
            } => [1, *tokens_per_frame],
        }
    }
}

pub trait FeatureMap: Send + Sync + std::fmt::Debug {
    fn spec(&self) -> FeatureMapSpec;

    fn tokens_per_frame(&self) -> usize;

    fn segment_dim(&self) -> usize;

    /// `L·D` values, segment-major.
    fn features(&self, frame: &Frame) -> Result<Vec<f64>>;

    /// Rebuilds a frame from segment vectors, for maps that live in pixel space.
    fn reassemble(&self, _segments: &[&[f64]]) -> Option<Frame> {
        None
    }
}

pub struct FeatureContext {
    pub spec: FeatureMapSpec,
    pub encoder: Option<Arc<InverseDynamicsEncoder>>,
}

fn build_raw(ctx: &FeatureContext) -> Result<Box<dyn FeatureMap>> {
    match &ctx.spec {
        FeatureMapSpec::RawPixels {
            frame_shape,
            patch_grid,
        } => Ok(Box::new(RawPixels::new(*frame_shape, *patch_grid)?)),
        other => Err(mismatch("raw-pixels", other)),
    }
}

fn build_frozen(ctx: &FeatureContext) -> Result<Box<dyn FeatureMap>> {
    match &ctx.spec {
        FeatureMapSpec::FrozenRandom {
            frame_shape,
            patch_grid,
            out_dim,
            seed,
        } => Ok(Box::new(FrozenRandom::new(
            *frame_shape,
            *patch_grid,
            *out_dim,
            *seed,
        )?)),
        other => Err(mismatch("frozen-random", other)),
    }
}

fn build_inverse(ctx: &FeatureContext) -> Result<Box<dyn FeatureMap>> {
    let encoder = ctx.encoder.clone().ok_or_else(|| {
        VocError::Config("inverse-dynamics feature map needs a trained encoder".into())
    })?;
    let mut map = InverseDynamicsFeatures::new(encoder);
    if let FeatureMapSpec::InverseDynamics { encoder, .. } = &ctx.spec {
        map = map.with_checkpoint_name(encoder.clone());
    }
    Ok(Box::new(map))
}

static REGISTRY: LazyLock<Registry<FeatureContext, dyn FeatureMap>> = LazyLock::new(|| {
    Registry::new("feature map")
        .register("raw-pixels", build_raw)
        .register("frozen-random", build_frozen)
        .register("inverse-dynamics", build_inverse)
});

fn mismatch(name: &str, spec: &FeatureMapSpec) -> VocError {
    VocError::Config(format!(
        "feature map `{name}` given a `{}` spec",
        spec.name()
    ))
}

pub fn feature_map_registry() -> &'static Registry<FeatureContext, dyn FeatureMap> {
    &REGISTRY
}

pub fn build_feature_map(
    spec: FeatureMapSpec,
    encoder: Option<Arc<InverseDynamicsEncoder>>,
) -> Result<Arc<dyn FeatureMap>> {
    let name = spec.name();
    let ctx = FeatureContext { spec, encoder };
    Ok(Arc::from(REGISTRY.build(name, &ctx)?))
}

/// Patch geometry shared by the pixel-space maps.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Tiling {
    frame_shape: [usize; 3],
    patch_grid: [usize; 2],
    patch_h: usize,
    patch_w: usize,
}

impl Tiling {
    fn new(frame_shape: [usize; 3], patch_grid: [usize; 2]) -> Result<Self> {
        let [h, w, c] = frame_shape;
        let [pr, pc] = patch_grid;
        if pr == 0 || pc == 0 || h % pr != 0 || w % pc != 0 || c == 0 {
            return Err(VocError::Config(format!(
                "frame {h}x{w}x{c} cannot be tiled by a {pr}x{pc} patch grid"
            )));
        }
        Ok(Self {
            frame_shape,
            patch_grid,
            patch_h: h / pr,
            patch_w: w / pc,
        })
    }

    fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * self.frame_shape[2]
    }

    fn n_patches(&self) -> usize {
        self.patch_grid[0] * self.patch_grid[1]
    }

    fn check(&self, frame: &Frame) -> Result<()> {
        let (h, w, c) = frame.shape();
        if [h, w, c] != self.frame_shape {
            return Err(VocError::InvalidInput(format!(
                "frame shape {h}x{w}x{c} does not match tiling {:?}",
                self.frame_shape
            )));
        }
        Ok(())
    }

    /// Patch pixels scaled to [0, 1]; row-major patches, then row, column, channel.
    fn patches(&self, frame: &Frame) -> Result<Vec<Vec<f64>>> {
        self.check(frame)?;
        let c = self.frame_shape[2];
        let mut out = Vec::with_capacity(self.n_patches());
        for pr in 0..self.patch_grid[0] {
            for pc in 0..self.patch_grid[1] {
                let mut p = Vec::with_capacity(self.patch_len());
                for r in 0..self.patch_h {
                    for col in 0..self.patch_w {
                        for ch in 0..c {
                            let px = frame.at(pr * self.patch_h + r, pc * self.patch_w + col, ch);
                            p.push(px as f64 / 255.0);
                        }
                    }
                }
                out.push(p);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct RawPixels {
    tiling: Tiling,
}

impl RawPixels {
    pub fn new(frame_shape: [usize; 3], patch_grid: [usize; 2]) -> Result<Self> {
        Ok(Self {
            tiling: Tiling::new(frame_shape, patch_grid)?,
        })
    }
}

impl FeatureMap for RawPixels {
    fn spec(&self) -> FeatureMapSpec {
        FeatureMapSpec::RawPixels {
            frame_shape: self.tiling.frame_shape,
            patch_grid: self.tiling.patch_grid,
        }
    }

    fn tokens_per_frame(&self) -> usize {
        self.tiling.n_patches()
    }

    fn segment_dim(&self) -> usize {
        self.tiling.patch_len()
    }

    fn features(&self, frame: &Frame) -> Result<Vec<f64>> {
        Ok(self.tiling.patches(frame)?.concat())
    }

    fn reassemble(&self, segments: &[&[f64]]) -> Option<Frame> {
        let t = &self.tiling;
        let [h, w, c] = t.frame_shape;
        if segments.len() != t.n_patches() || segments.iter().any(|s| s.len() != t.patch_len()) {
            return None;
        }
        let mut pixels = vec![0u8; h * w * c];
        for (i, seg) in segments.iter().enumerate() {
            let (pr, pc) = (i / t.patch_grid[1], i % t.patch_grid[1]);
            let mut k = 0;
            for r in 0..t.patch_h {
                for col in 0..t.patch_w {
                    for ch in 0..c {
                        let (y, x) = (pr * t.patch_h + r, pc * t.patch_w + col);
                        pixels[(y * w + x) * c + ch] =
                            (seg[k] * 255.0).round().clamp(0.0, 255.0) as u8;
                        k += 1;
                    }
                }
            }
        }
        Frame::new(h, w, c, pixels).ok()
    }
}

/// A fixed random linear projection applied to every patch, followed by tanh.
/// Weights are regenerated from the seed, so only the seed is persisted.
#[derive(Clone, Debug)]
pub struct FrozenRandom {
    tiling: Tiling,
    out_dim: usize,
    seed: u64,
    weights: Vec<f64>,
}

impl FrozenRandom {
    pub fn new(
        frame_shape: [usize; 3],
        patch_grid: [usize; 2],
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let tiling = Tiling::new(frame_shape, patch_grid)?;
        if out_dim == 0 {
            return Err(VocError::Config(
                "frozen-random out_dim must be positive".into(),
            ));
        }
        let n_in = tiling.patch_len();
        let mut rng = rng_for(seed, streams::INIT);
        let scale = (3.0 / n_in as f64).sqrt();
        let weights = (0..out_dim * n_in)
            .map(|_| (2.0 * rng.random::<f64>() - 1.0) * scale)
            .collect();
        Ok(Self {
            tiling,
            out_dim,
            seed,
            weights,
        })
    }
}

impl FeatureMap for FrozenRandom {
    fn spec(&self) -> FeatureMapSpec {
        FeatureMapSpec::FrozenRandom {
            frame_shape: self.tiling.frame_shape,
            patch_grid: self.tiling.patch_grid,
            out_dim: self.out_dim,
            seed: self.seed,
        }
    }

    fn tokens_per_frame(&self) -> usize {
        self.tiling.n_patches()
    }

    fn segment_dim(&self) -> usize {
        self.out_dim
    }

    fn features(&self, frame: &Frame) -> Result<Vec<f64>> {
        let n_in = self.tiling.patch_len();
        let mut out = Vec::with_capacity(self.tiling.n_patches() * self.out_dim);
        for p in self.tiling.patches(frame)? {
            for row in self.weights.chunks(n_in) {
                let dot: f64 = row.iter().zip(&p).map(|(w, x)| w * x).sum();
                out.push(dot.tanh());
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct InverseDynamicsFeatures {
    encoder: Arc<InverseDynamicsEncoder>,
    checkpoint_name: String,
}

impl InverseDynamicsFeatures {
    pub fn new(encoder: Arc<InverseDynamicsEncoder>) -> Self {
        Self {
            encoder,
            checkpoint_name: "encoder.ckpt".into(),
        }
    }

    pub fn with_checkpoint_name(mut self, name: impl Into<String>) -> Self {
        self.checkpoint_name = name.into();
        self
    }

    pub fn encoder(&self) -> &Arc<InverseDynamicsEncoder> {
        &self.encoder
    }
}

impl FeatureMap for InverseDynamicsFeatures {
    fn spec(&self) -> FeatureMapSpec {
        let cfg = self.encoder.config();
        FeatureMapSpec::InverseDynamics {
            frame_shape: self.encoder.frame_shape(),
            tokens_per_frame: cfg.tokens_per_frame,
            segment_dim: cfg.segment_dim,
            encoder: self.checkpoint_name.clone(),
        }
    }

    fn tokens_per_frame(&self) -> usize {
        self.encoder.config().tokens_per_frame
    }

    fn segment_dim(&self) -> usize {
        self.encoder.config().segment_dim
    }

    fn features(&self, frame: &Frame) -> Result<Vec<f64>> {
        self.encoder.features(frame)
    }
}
