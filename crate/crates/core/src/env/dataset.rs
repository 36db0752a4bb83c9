//! Trajectory collection and the binary `VOCD` dataset file.
//!
//! Layout (little-endian): magic `VOCD`, version `u32 = 1`, `n_traj: u32`,
//! `h_px: u16`, `w_px: u16`, `channels: u8`, reserved `u8`; then per
//! trajectory: `length: u32` (frames), `length * h * w * c` frame bytes,
//! `length - 1` actions as `u16`, `length - 1` rewards as `f32`, a `u8`
//! flag and, if it is 1, `length` state ids as `u32`.

use std::io::{Read, Write};

use rand::Rng;

use super::grid::{Frame, GridWorld};
use super::mdp::{MdpSpec, PolicyMatrix};
use super::policy::Policy;
use crate::error::{Result, VocError};
use crate::rng::{rng_for, VocRng};

pub const DATASET_MAGIC: &[u8; 4] = b"VOCD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Ground-truth states, for oracle comparisons only.
    pub state_ids: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 || self.actions.len() + 1 != n || self.rewards.len() + 1 != n {
            return Err(VocError::InvalidInput(format!(
                "trajectory with {n} frames needs {} actions and rewards, got {} and {}",
                n.saturating_sub(1),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        let shape = self.frames[0].shape();
        if self.frames.iter().any(|f| f.shape() != shape) {
            return Err(VocError::InvalidInput("frames differ in shape".into()));
        }
        if let Some(ids) = &self.state_ids {
            if ids.len() != n {
                return Err(VocError::InvalidInput(
                    "state_ids length differs from frames".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Rolls out `policy` from a uniformly drawn non-goal state. Trajectory `i`
/// uses stream `i` of `seed`. Episodic worlds stop at the goal.
pub fn generate_dataset(
    env: &GridWorld,
    policy: &Policy,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_traj == 0 || traj_len < 2 {
        return Err(VocError::InvalidInput(
            "need n_traj >= 1 and traj_len >= 2".into(),
        ));
    }
    policy.validate()?;
    let starts: Vec<usize> = (0..env.n_states())
        .filter(|s| *s != env.goal_id())
        .collect();
    if starts.is_empty() {
        return Err(VocError::Config("grid has no non-goal start state".into()));
    }
    (0..n_traj)
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let start = starts[rng.random_range(0..starts.len())];
            rollout_from(&env.with_state(start)?, policy, traj_len, &mut rng)
        })
        .collect()
}

pub fn rollout_from(
    env: &GridWorld,
    policy: &Policy,
    traj_len: usize,
    rng: &mut VocRng,
) -> Result<Trajectory> {
    let mut env = env.clone();
    let mut frames = vec![env.render()];
    let mut ids = vec![env.state_id()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for t in 0..traj_len - 1 {
        let a = policy.sample_action(&env, t, rng);
        let (next, r, done) = env.step(a, rng)?;
        env = next;
        frames.push(env.render());
        ids.push(env.state_id());
        actions.push(a);
        rewards.push(r);
        if done {
            break;
        }
    }
    Ok(Trajectory {
        frames,
        actions,
        rewards,
        state_ids: Some(ids),
    })
}

/// State sequence of a finite MDP under a Markov policy.
pub fn sample_chain(
    mdp: &MdpSpec,
    policy: &PolicyMatrix,
    start: usize,
    len: usize,
    rng: &mut VocRng,
) -> Result<Vec<usize>> {
    if start >= mdp.n_states {
        return Err(VocError::InvalidInput(format!(
            "start state {start} out of range"
        )));
    }
    let mut states = Vec::with_capacity(len);
    let mut s = start;
    states.push(s);
    while states.len() < len {
        let a = sample_index(policy.row(s), rng);
        s = sample_index(mdp.row(s, a), rng);
        states.push(s);
    }
    Ok(states)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1)
}

pub fn write_dataset<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<()> {
    let first = trajs
        .first()
        .ok_or_else(|| VocError::InvalidInput("cannot write an empty dataset".into()))?;
    let (h, wpx, ch) = first.frames[0].shape();
    if h > u16::MAX as usize || wpx > u16::MAX as usize || ch > u8::MAX as usize {
        return Err(VocError::Format(
            "frame dimensions exceed header field widths".into(),
        ));
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(trajs.len() as u32).to_le_bytes())?;
    w.write_all(&(h as u16).to_le_bytes())?;
    w.write_all(&(wpx as u16).to_le_bytes())?;
    w.write_all(&[ch as u8, 0])?;
    for t in trajs {
        t.validate()?;
        if t.frames[0].shape() != (h, wpx, ch) {
            return Err(VocError::InvalidInput(
                "trajectories differ in frame shape".into(),
            ));
        }
        w.write_all(&(t.len() as u32).to_le_bytes())?;
        for f in &t.frames {
            w.write_all(&f.pixels)?;
        }
        for &a in &t.actions {
            let a = u16::try_from(a)
                .map_err(|_| VocError::Format(format!("action {a} exceeds u16")))?;
            w.write_all(&a.to_le_bytes())?;
        }
        for &r in &t.rewards {
            w.write_all(&(r as f32).to_le_bytes())?;
        }
        match &t.state_ids {
            Some(ids) => {
                w.write_all(&[1])?;
                for &s in ids {
                    w.write_all(&(s as u32).to_le_bytes())?;
                }
            }
            None => w.write_all(&[0])?,
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| VocError::Format(format!("truncated dataset: {e}")))?;
    Ok(buf)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<Trajectory>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != DATASET_MAGIC {
        return Err(VocError::Format("not a VOCD dataset".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != DATASET_VERSION {
        return Err(VocError::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let n = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let h = u16::from_le_bytes(read_exact(&mut r)?) as usize;
    let w = u16::from_le_bytes(read_exact(&mut r)?) as usize;
    let [ch, _reserved]: [u8; 2] = read_exact(&mut r)?;
    let ch = ch as usize;
    let frame_bytes = h * w * ch;
    let mut trajs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        if len == 0 {
            return Err(VocError::Format("zero-length trajectory".into()));
        }
        let mut frames = Vec::with_capacity(len);
        for _ in 0..len {
            let mut px = vec![0u8; frame_bytes];
            r.read_exact(&mut px)
                .map_err(|e| VocError::Format(format!("truncated frames: {e}")))?;
            frames.push(Frame::new(h, w, ch, px)?);
        }
        let mut actions = Vec::with_capacity(len - 1);
        for _ in 0..len - 1 {
            actions.push(u16::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let mut rewards = Vec::with_capacity(len - 1);
        for _ in 0..len - 1 {
            rewards.push(f32::from_le_bytes(read_exact(&mut r)?) as f64);
        }
        let [flag]: [u8; 1] = read_exact(&mut r)?;
        let state_ids = match flag {
            0 => None,
            1 => {
                let mut ids = Vec::with_capacity(len);
                for _ in 0..len {
                    ids.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
                }
                Some(ids)
            }
            other => return Err(VocError::Format(format!("bad state_ids flag {other}"))),
        };
        trajs.push(Trajectory {
            frames,
            actions,
            rewards,
            state_ids,
        });
    }
    Ok(trajs)
}
