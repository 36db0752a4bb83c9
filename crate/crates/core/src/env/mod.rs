//! Finite MDPs, the pixel gridworld, behavior policies and trajectory datasets.

mod dataset;
mod grid;
mod mdp;
mod policy;

pub use dataset::{
    generate_dataset, read_dataset, rollout_from, sample_chain, sample_index, write_dataset,
    Trajectory, DATASET_MAGIC, DATASET_VERSION,
};
pub use grid::{
    Frame, GridConfig, GridWorld, Pos, AGENT_INTENSITY, BACKGROUND, DOWN, GOAL_INTENSITY, LEFT,
    NUM_ACTIONS, RIGHT, UP,
};
pub use mdp::{MdpSpec, PolicyMatrix};
pub use policy::{greedy_to_goal, Policy};
