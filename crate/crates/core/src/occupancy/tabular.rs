//! Exact table over enumerable latents. Each visited conditioning latent owns
//! a distribution over the target latents interned so far.
//!
//! Checkpoint: `u64` LE header length, JSON header, then one dense row of
//! `n_targets` `f64` LE per conditioning latent, in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TdModel;
use super::{sample_index, OccupancyModel};
use crate::error::{Result, VocError};
use crate::rng::VocRng;
use crate::tokenizer::{LatentLayout, LatentState};

pub const TABULAR_FORMAT: &str = "voc-tabular-occupancy";

/// Step size of a row's `n`-th update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepSize {
    Constant {
        lr: f64,
    },
    /// `min(1, lr0 · n^-power)` at a row's `n`-th visit; `power = 1, lr0 = 1`
    /// is the running average.
    Polynomial {
        lr0: f64,
        power: f64,
    },
}

impl StepSize {
    pub fn at(&self, n: u64) -> f64 {
        match *self {
            StepSize::Constant { lr } => lr,
            StepSize::Polynomial { lr0, power } => (lr0 * (n as f64).powf(-power)).min(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    pub step_size: StepSize,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            step_size: StepSize::Polynomial {
                lr0: 1.0,
                power: 0.75,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Row {
    probs: Vec<f64>,
    visits: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularOccupancy {
    layout: LatentLayout,
    gamma: f64,
    cfg: TabularConfig,
    targets: Vec<LatentState>,
    index: BTreeMap<LatentState, usize>,
    rows: BTreeMap<LatentState, Row>,
}

#[derive(Serialize, Deserialize)]
struct Hyper {
    backend: String,
    gamma: f64,
    layout: LatentLayout,
    config: TabularConfig,
}

#[derive(Serialize, Deserialize)]
struct RowHeader {
    cond: Vec<u16>,
    visits: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    hyperparameters: Hyper,
    targets: Vec<Vec<u16>>,
    rows: Vec<RowHeader>,
}

fn describe(z: &LatentState) -> String {
    format!("{:?}", z.tokens())
}

impl TabularOccupancy {
    pub fn new(layout: LatentLayout, gamma: f64, cfg: TabularConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(VocError::Config(format!("gamma {gamma} outside [0, 1)")));
        }
        Ok(Self {
            layout,
            gamma,
            cfg,
            targets: Vec::new(),
            index: BTreeMap::new(),
            rows: BTreeMap::new(),
        })
    }

    /// A table holding the given rows exactly, each renormalized to sum to 1.
    pub fn from_rows(
        layout: LatentLayout,
        gamma: f64,
        rows: &[(LatentState, Vec<(LatentState, f64)>)],
    ) -> Result<Self> {
        let mut m = Self::new(layout, gamma, TabularConfig::default())?;
        for (z, dist) in rows {
            layout.check(z)?;
            let total: f64 = dist.iter().map(|(_, p)| p).sum();
            if !(total > 0.0) || dist.iter().any(|(_, p)| !(*p >= 0.0)) {
                return Err(VocError::InvalidInput(format!(
                    "row {} is not a distribution",
                    describe(z)
                )));
            }
            let mut probs = Vec::new();
            for (e, p) in dist {
                layout.check(e)?;
                let i = m.intern(e);
                if probs.len() <= i {
                    probs.resize(i + 1, 0.0);
                }
                probs[i] += p / total;
            }
            m.rows.insert(z.clone(), Row { probs, visits: 1 });
        }
        let width = m.targets.len();
        m.rows.values_mut().for_each(|r| r.probs.resize(width, 0.0));
        Ok(m)
    }

    pub fn targets(&self) -> &[LatentState] {
        &self.targets
    }

    pub fn conditioning_latents(&self) -> impl Iterator<Item = &LatentState> {
        self.rows.keys()
    }

    pub fn visits(&self, z: &LatentState) -> u64 {
        self.rows.get(z).map_or(0, |r| r.visits)
    }

    /// Probability of `z_e` under row `z`, or `None` for an unseen row.
    pub fn prob(&self, z: &LatentState, z_e: &LatentState) -> Option<f64> {
        let row = self.rows.get(z)?;
        Some(
            self.index
                .get(z_e)
                .and_then(|&i| row.probs.get(i))
                .copied()
                .unwrap_or(0.0),
        )
    }

    /// Non-zero entries of row `z`.
    pub fn distribution(&self, z: &LatentState) -> Option<Vec<(&LatentState, f64)>> {
        let row = self.rows.get(z)?;
        Some(
            row.probs
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(i, p)| (&self.targets[i], *p))
                .collect(),
        )
    }

    fn intern(&mut self, z: &LatentState) -> usize {
        if let Some(&i) = self.index.get(z) {
            return i;
        }
        self.targets.push(z.clone());
        self.index.insert(z.clone(), self.targets.len() - 1);
        self.targets.len() - 1
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tpf = self.layout.tokens_per_frame;
        let header = Header {
            format: TABULAR_FORMAT.into(),
            version: 1,
            hyperparameters: Hyper {
                backend: "tabular".into(),
                gamma: self.gamma,
                layout: self.layout,
                config: self.cfg.clone(),
            },
            targets: self.targets.iter().map(|z| z.tokens().to_vec()).collect(),
            rows: self
                .rows
                .iter()
                .map(|(z, r)| RowHeader {
                    cond: z.tokens().to_vec(),
                    visits: r.visits,
                })
                .collect(),
        };
        debug_assert!(self.targets.iter().all(|z| z.tokens_per_frame() == tpf));
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.rows.len() * self.targets.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for r in self.rows.values() {
            for i in 0..self.targets.len() {
                out.extend_from_slice(&r.probs.get(i).copied().unwrap_or(0.0).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || VocError::Format("truncated tabular checkpoint".into());
        let n = u64::from_le_bytes(
            bytes
                .get(..8)
                .ok_or_else(short)?
                .try_into()
                .expect("8 bytes"),
        ) as usize;
        let header: Header = serde_json::from_slice(bytes.get(8..8 + n).ok_or_else(short)?)?;
        if header.format != TABULAR_FORMAT || header.version != 1 {
            return Err(VocError::Format(format!(
                "not a tabular checkpoint: {} v{}",
                header.format, header.version
            )));
        }
        let h = header.hyperparameters;
        let mut model = Self::new(h.layout, h.gamma, h.config)?;
        let tpf = h.layout.tokens_per_frame;
        for t in header.targets {
            let z = LatentState::new(t, tpf)?;
            model.intern(&z);
        }
        let width = model.targets.len();
        let blob = &bytes[8 + n..];
        if blob.len() != header.rows.len() * width * 8 {
            return Err(short());
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        for r in header.rows {
            let probs: Vec<f64> = values.by_ref().take(width).collect();
            model.rows.insert(
                LatentState::new(r.cond, tpf)?,
                Row {
                    probs,
                    visits: r.visits,
                },
            );
        }
        Ok(model)
    }
}

impl OccupancyModel for TabularOccupancy {
    fn backend(&self) -> &'static str {
        "tabular"
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn layout(&self) -> LatentLayout {
        self.layout
    }

    fn sample_batch(&self, conds: &[&LatentState], rng: &mut VocRng) -> Result<Vec<LatentState>> {
        conds
            .iter()
            .map(|z| {
                let row = self
                    .rows
                    .get(*z)
                    .ok_or_else(|| VocError::UnseenConditioning(describe(z)))?;
                Ok(self.targets[sample_index(&row.probs, rng)].clone())
            })
            .collect()
    }

    fn log_density(&self, z: &LatentState, z_e: &LatentState) -> Result<f64> {
        let p = self
            .prob(z, z_e)
            .ok_or_else(|| VocError::UnseenConditioning(describe(z)))?;
        Ok(if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
    }

    fn knows(&self, z: &LatentState) -> bool {
        self.rows.contains_key(z)
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

impl TdModel for TabularOccupancy {
    /// Moves row `z_t` a step `α` toward the one-hot target, then renormalizes.
    fn td_update(
        &mut self,
        conds: &[&LatentState],
        targets: &[&LatentState],
    ) -> Result<(f64, f64)> {
        let (mut loss, mut alpha_sum) = (0.0, 0.0);
        for (z, y) in conds.iter().zip(targets) {
            let p = self.prob(z, y).unwrap_or(0.0);
            loss -= p.max(1e-12).ln();
            let j = self.intern(y);
            let width = self.targets.len();
            let row = self.rows.entry((*z).clone()).or_insert_with(|| Row {
                probs: Vec::new(),
                visits: 0,
            });
            row.probs.resize(width, 0.0);
            row.visits += 1;
            let alpha = self.cfg.step_size.at(row.visits);
            alpha_sum += alpha;
            for q in &mut row.probs {
                *q *= 1.0 - alpha;
            }
            row.probs[j] += alpha;
            let s: f64 = row.probs.iter().sum();
            for q in &mut row.probs {
                *q /= s;
            }
        }
        let n = conds.len().max(1) as f64;
        Ok((loss / n, alpha_sum / n))
    }

    /// Rows the target has not seen yet are copied from `online`.
    fn ema_toward(&mut self, online: &Self, rho: f64) -> Result<()> {
        for z in &online.targets[self.targets.len().min(online.targets.len())..] {
            self.intern(z);
        }
        if self.targets[..online.targets.len()] != online.targets[..] {
            return Err(VocError::Internal(
                "target table interned latents in a different order".into(),
            ));
        }
        let width = self.targets.len();
        for (z, o) in &online.rows {
            match self.rows.get_mut(z) {
                Some(r) => {
                    r.probs.resize(width, 0.0);
                    for (i, q) in r.probs.iter_mut().enumerate() {
                        *q = rho * *q + (1.0 - rho) * o.probs.get(i).copied().unwrap_or(0.0);
                    }
                    r.visits = o.visits;
                }
                None => {
                    self.rows.insert(z.clone(), o.clone());
                }
            }
        }
        Ok(())
    }
}
