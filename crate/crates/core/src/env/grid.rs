use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mdp::MdpSpec;
use crate::error::{Result, VocError};

pub const NUM_ACTIONS: usize = 4;
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

pub const BACKGROUND: u8 = 0;
pub const GOAL_INTENSITY: u8 = 128;
pub const AGENT_INTENSITY: u8 = 255;

/// 8-bit image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(VocError::InvalidInput(format!(
                "frame {height}x{width}x{channels} needs {} bytes, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub goal: Pos,
    pub slip_prob: f64,
    /// `(h_px, w_px)`.
    pub render_size: (usize, usize),
    pub episodic: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            goal: Pos::new(4, 4),
            slip_prob: 0.1,
            render_size: (10, 10),
            episodic: false,
        }
    }
}

/// Pixel-rendered gridworld with optional slip.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    cfg: GridConfig,
    agent: Pos,
}

impl GridWorld {
    pub fn new(cfg: GridConfig, agent: Pos) -> Result<Self> {
        if cfg.width == 0 || cfg.height == 0 {
            return Err(VocError::Config("grid dimensions must be positive".into()));
        }
        let inside = |p: Pos| p.row < cfg.height && p.col < cfg.width;
        if !inside(agent) || !inside(cfg.goal) {
            return Err(VocError::Config(
                "agent and goal must lie inside the grid".into(),
            ));
        }
        if !(0.0..1.0).contains(&cfg.slip_prob) {
            return Err(VocError::Config("slip_prob must be in [0, 1)".into()));
        }
        let (h, w) = cfg.render_size;
        if h == 0 || w == 0 || h % cfg.height != 0 || w % cfg.width != 0 {
            return Err(VocError::Config(format!(
                "render size {h}x{w} is not divisible by grid {}x{}",
                cfg.height, cfg.width
            )));
        }
        Ok(Self { cfg, agent })
    }

    /// 1-row corridor with the goal at the right end.
    pub fn corridor(length: usize, cell_px: usize, start: usize) -> Result<Self> {
        let cfg = GridConfig {
            width: length,
            height: 1,
            goal: Pos::new(0, length.saturating_sub(1)),
            slip_prob: 0.0,
            render_size: (cell_px, cell_px * length),
            episodic: false,
        };
        Self::new(cfg, Pos::new(0, start))
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn goal(&self) -> Pos {
        self.cfg.goal
    }

    pub fn n_states(&self) -> usize {
        self.cfg.width * self.cfg.height
    }

    pub fn state_id(&self) -> usize {
        self.pos_id(self.agent)
    }

    pub fn pos_id(&self, p: Pos) -> usize {
        p.row * self.cfg.width + p.col
    }

    pub fn pos_of(&self, id: usize) -> Pos {
        Pos::new(id / self.cfg.width, id % self.cfg.width)
    }

    pub fn goal_id(&self) -> usize {
        self.pos_id(self.cfg.goal)
    }

    pub fn at_goal(&self) -> bool {
        self.agent == self.cfg.goal
    }

    pub fn with_agent(&self, agent: Pos) -> Result<Self> {
        Self::new(self.cfg.clone(), agent)
    }

    pub fn with_state(&self, id: usize) -> Result<Self> {
        if id >= self.n_states() {
            return Err(VocError::InvalidInput(format!("state {id} outside grid")));
        }
        self.with_agent(self.pos_of(id))
    }

    /// Position reached by moving in `dir`, clamped at the walls.
    pub fn moved(&self, from: Pos, dir: usize) -> Pos {
        let mut p = from;
        match dir {
            UP => p.row = p.row.saturating_sub(1),
            DOWN => p.row = (p.row + 1).min(self.cfg.height - 1),
            LEFT => p.col = p.col.saturating_sub(1),
            _ => p.col = (p.col + 1).min(self.cfg.width - 1),
        }
        p
    }

    /// One transition. Draws a uniform `u`; if `u < slip_prob` a uniformly
    /// random direction replaces `action`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        action: usize,
        rng: &mut R,
    ) -> Result<(GridWorld, f64, bool)> {
        if action >= NUM_ACTIONS {
            return Err(VocError::InvalidInput(format!(
                "action {action} is not one of up/down/left/right"
            )));
        }
        let mut dir = action;
        if self.cfg.slip_prob > 0.0 && rng.random::<f64>() < self.cfg.slip_prob {
            dir = rng.random_range(0..NUM_ACTIONS);
        }
        let next = Self {
            cfg: self.cfg.clone(),
            agent: self.moved(self.agent, dir),
        };
        let reward = if next.at_goal() { 1.0 } else { 0.0 };
        let done = self.cfg.episodic && next.at_goal();
        Ok((next, reward, done))
    }

    pub fn render(&self) -> Frame {
        let (h, w) = self.cfg.render_size;
        let ch = h / self.cfg.height;
        let cw = w / self.cfg.width;
        let mut pixels = vec![BACKGROUND; h * w];
        let mut paint = |p: Pos, v: u8| {
            for r in p.row * ch..(p.row + 1) * ch {
                for c in p.col * cw..(p.col + 1) * cw {
                    pixels[r * w + c] = v;
                }
            }
        };
        paint(self.cfg.goal, GOAL_INTENSITY);
        paint(self.agent, AGENT_INTENSITY);
        Frame {
            height: h,
            width: w,
            channels: 1,
            pixels,
        }
    }

    /// Exact tabular model of [`GridWorld::step`]; `r[s] = 1` iff `s` is the goal.
    pub fn as_mdp(&self) -> MdpSpec {
        let n = self.n_states();
        let slip = self.cfg.slip_prob;
        let mut t = vec![0.0; n * NUM_ACTIONS * n];
        for s in 0..n {
            let p = self.pos_of(s);
            for a in 0..NUM_ACTIONS {
                let base = (s * NUM_ACTIONS + a) * n;
                t[base + self.pos_id(self.moved(p, a))] += 1.0 - slip;
                for d in 0..NUM_ACTIONS {
                    t[base + self.pos_id(self.moved(p, d))] += slip / NUM_ACTIONS as f64;
                }
            }
        }
        let mut reward = vec![0.0; n];
        reward[self.goal_id()] = 1.0;
        let initial = if n == 1 {
            vec![1.0]
        } else {
            (0..n)
                .map(|s| {
                    if s == self.goal_id() {
                        0.0
                    } else {
                        1.0 / (n - 1) as f64
                    }
                })
                .collect()
        };
        MdpSpec {
            n_states: n,
            n_actions: NUM_ACTIONS,
            transition: t,
            reward,
            initial_dist: initial,
        }
    }
}
