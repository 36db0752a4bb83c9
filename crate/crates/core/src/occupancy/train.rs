//! The generative TD loop shared by both backends.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    draw_branch, offset_target, Branch, LatentTrajectory, OccupancyModel, Sampling, TrainConfig,
};
use crate::error::{Result, VocError};
use crate::rng::{rng_for, streams, VocRng};
use crate::tokenizer::LatentState;

pub trait TdModel: OccupancyModel + Clone {
    /// One update pulling `M(·|conds[i])` toward `targets[i]`. Returns the mean
    /// loss before the update and the step size used.
    fn td_update(&mut self, conds: &[&LatentState], targets: &[&LatentState])
        -> Result<(f64, f64)>;

    /// `self <- rho * self + (1 - rho) * online`.
    fn ema_toward(&mut self, online: &Self, rho: f64) -> Result<()>;
}

/// The bootstrap copy `M′`. It only changes through [`TargetModel::update`].
#[derive(Clone, Debug)]
pub struct TargetModel<M> {
    model: M,
    rho: f64,
}

impl<M: TdModel> TargetModel<M> {
    pub fn new(model: M, rho: f64) -> Self {
        Self { model, rho }
    }

    pub fn update(&mut self, online: &M) -> Result<()> {
        self.model.ema_toward(online, self.rho)
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }
}

/// `latents[t + 1 ..= t + len]` of trajectory `traj` are the futures of `latents[t]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub t: usize,
    pub len: usize,
}

/// Windows with a full `k_max` futures; terminal trajectories also keep the
/// shorter windows at their end. Trajectory ends that merely truncate a
/// continuing run are dropped rather than treated as terminal.
pub fn build_windows(data: &[LatentTrajectory], k_max: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (i, tr) in data.iter().enumerate() {
        let n = tr.latents.len();
        for t in 0..n.saturating_sub(1) {
            let avail = n - 1 - t;
            if avail >= k_max {
                out.push(Window {
                    traj: i,
                    t,
                    len: k_max,
                });
            } else if tr.terminal {
                out.push(Window {
                    traj: i,
                    t,
                    len: avail,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub frac_next_step: f64,
    pub frac_k_step: f64,
    pub frac_bootstrap: f64,
    /// Bootstrap draws whose conditioning latent the target could not sample
    /// from; those use the window's last latent instead.
    pub frac_fallback: f64,
    pub lr: f64,
}

pub fn write_training_log<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(
        w,
        "step,loss,frac_next_step,frac_k_step,frac_bootstrap,frac_fallback,lr"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{:.10},{:.6},{:.6},{:.6},{:.6},{:.10e}",
            r.step,
            r.loss,
            r.frac_next_step,
            r.frac_k_step,
            r.frac_bootstrap,
            r.frac_fallback,
            r.lr
        )?;
    }
    Ok(())
}

pub struct TrainOutcome<M> {
    pub model: M,
    pub target: TargetModel<M>,
    pub log: Vec<LogRow>,
}

/// What one [`td_train_step`] did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub next_step: u64,
    pub k_step: u64,
    pub bootstrap: u64,
    pub fallback: u64,
}

/// One TD update on a minibatch of `(z_t, futures)` pairs: draws each
/// temporal target, runs one update of `model`, then moves `target` toward it.
pub fn td_train_step<M: TdModel>(
    model: &mut M,
    target: &mut TargetModel<M>,
    batch: &[(&LatentState, &[LatentState])],
    cfg: &TrainConfig,
    rng: &mut VocRng,
) -> Result<StepStats> {
    let mut stats = StepStats::default();
    let mut targets: Vec<Option<&LatentState>> = Vec::with_capacity(batch.len());
    let mut boot_conds = Vec::new();
    for (_, futures) in batch {
        let last = futures
            .last()
            .ok_or_else(|| VocError::InvalidInput("empty future window".into()))?;
        let branch = draw_branch(cfg.gamma, cfg.k_max, rng);
        match branch {
            Branch::NextStep => stats.next_step += 1,
            Branch::KStep(_) => stats.k_step += 1,
            Branch::Bootstrap => stats.bootstrap += 1,
        }
        match offset_target(futures, branch) {
            Some(z) => targets.push(Some(z)),
            None if target.model().knows(last) => {
                boot_conds.push(last);
                targets.push(None);
            }
            None => {
                stats.fallback += 1;
                targets.push(Some(last));
            }
        }
    }
    // all bootstrap draws of the batch go through the target in one call
    let sampled = if boot_conds.is_empty() {
        Vec::new()
    } else {
        target.model().sample_batch(&boot_conds, rng)?
    };
    let mut next_boot = sampled.iter();
    let resolved: Vec<&LatentState> = targets
        .iter()
        .map(|t| t.unwrap_or_else(|| next_boot.next().expect("one sample per bootstrap draw")))
        .collect();
    let conds: Vec<&LatentState> = batch.iter().map(|(z, _)| *z).collect();

    let (loss, lr) = model.td_update(&conds, &resolved)?;
    if loss.is_nan() {
        return Err(VocError::Divergence("NaN loss".into()));
    }
    target.update(model)?;
    stats.loss = loss;
    stats.lr = lr;
    Ok(stats)
}

pub fn train_td<M: TdModel>(
    mut model: M,
    data: &[LatentTrajectory],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if (model.gamma() - cfg.gamma).abs() > 0.0 {
        return Err(VocError::Config(format!(
            "model gamma {} differs from training gamma {}",
            model.gamma(),
            cfg.gamma
        )));
    }
    let layout = model.layout();
    for tr in data {
        for z in &tr.latents {
            layout.check(z)?;
        }
    }
    let windows = build_windows(data, cfg.k_max);
    if windows.is_empty() {
        return Err(VocError::InvalidInput(format!(
            "no trajectory has {} in-episode futures",
            cfg.k_max
        )));
    }
    let mut target = TargetModel::new(model.clone(), cfg.ema_decay);
    let mut rng = rng_for(cfg.seed, streams::TRAINING);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::new();
    let mut acc = StepStats::default();
    let mut steps_in_row = 0u64;

    for step in 1..=cfg.steps {
        let batch: Vec<(&LatentState, &[LatentState])> = (0..cfg.batch_size)
            .map(|_| {
                let w = match cfg.sampling {
                    Sampling::Uniform => windows[rng.random_range(0..windows.len())],
                    Sampling::Epochs => {
                        if cursor == order.len() {
                            order.shuffle(&mut rng);
                            cursor = 0;
                        }
                        cursor += 1;
                        windows[order[cursor - 1]]
                    }
                };
                let lat = &data[w.traj].latents;
                (&lat[w.t], &lat[w.t + 1..=w.t + w.len])
            })
            .collect();

        let s =
            td_train_step(&mut model, &mut target, &batch, cfg, &mut rng).map_err(|e| match e {
                VocError::Divergence(_) => VocError::Divergence(format!("NaN loss at step {step}")),
                e => e,
            })?;
        acc.loss += s.loss;
        acc.next_step += s.next_step;
        acc.k_step += s.k_step;
        acc.bootstrap += s.bootstrap;
        acc.fallback += s.fallback;
        steps_in_row += 1;

        if step % cfg.log_every == 0 || step == cfg.steps {
            let n = (steps_in_row * cfg.batch_size as u64) as f64;
            log.push(LogRow {
                step,
                loss: acc.loss / steps_in_row as f64,
                frac_next_step: acc.next_step as f64 / n,
                frac_k_step: acc.k_step as f64 / n,
                frac_bootstrap: acc.bootstrap as f64 / n,
                frac_fallback: acc.fallback as f64 / n,
                lr: s.lr,
            });
            acc = StepStats::default();
            steps_in_row = 0;
        }
    }
    Ok(TrainOutcome { model, target, log })
}
