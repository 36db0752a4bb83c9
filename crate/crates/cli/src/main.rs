use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use voc_cli::artifacts::Run;
use voc_cli::commands;
use voc_cli::ExperimentConfig;

/// Video occupancy model experiments on pixel gridworlds.
#[derive(Parser)]
#[command(name = "voc", version)]
struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behaviour policy into a trajectory dataset.
    GenData,
    /// Fit the k-means codebook over dataset frames.
    FitCodebook,
    /// Train the inverse-dynamics encoder.
    TrainMusik,
    /// Train the occupancy model by generative TD.
    TrainVoc {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Fit the reward regressor on tokenizer features.
    TrainReward,
    /// Per-state TV distance between the model and the exact occupancy.
    EvalOccupancy,
    /// Value estimates against the exact values.
    EvalValue {
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Decode model rollouts and samples into PGM strips.
    Rollout {
        #[arg(long, default_value_t = 0)]
        start_state: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Run model-predictive control episodes for each configured method.
    Mpc {
        /// Comma-separated list replacing `mpc.methods`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        n_episodes: Option<usize>,
    },
    /// Dump exact occupancy and values as CSV.
    Oracle {
        /// `cycle3` or `env` (the configured world under its behaviour policy).
        #[arg(long, default_value = "cycle3")]
        mdp: String,
        #[arg(long)]
        gamma: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::FitCodebook => "fit-codebook",
        Command::TrainMusik => "train-musik",
        Command::TrainVoc { .. } => "train-voc",
        Command::TrainReward => "train-reward",
        Command::EvalOccupancy => "eval-occupancy",
        Command::EvalValue { .. } => "eval-value",
        Command::Rollout { .. } => "rollout",
        Command::Mpc { .. } => "mpc",
        Command::Oracle { .. } => "oracle",
    };
    match &cli.command {
        Command::TrainVoc {
            gamma,
            backend,
            steps,
            k_max,
        } => {
            let m = &mut cfg.model;
            m.gamma = gamma.unwrap_or(m.gamma);
            m.steps = steps.unwrap_or(m.steps);
            m.k_max = k_max.unwrap_or(m.k_max);
            if let Some(b) = backend {
                m.backend = b.clone();
            }
        }
        Command::EvalValue { n_samples: Some(n) } => cfg.valuation.n_samples = *n,
        Command::Mpc {
            methods,
            n_episodes,
        } => {
            if let Some(ms) = methods {
                cfg.mpc.methods = ms.clone();
            }
            cfg.mpc.n_episodes = n_episodes.unwrap_or(cfg.mpc.n_episodes);
        }
        Command::Oracle { gamma: Some(g), .. } => cfg.model.gamma = *g,
        _ => {}
    }
    cfg.validate()?;
    eprintln!(
        "voc {name}: seed={} out={}",
        cfg.seed,
        cfg.output_dir.display()
    );
    let r = Run::new(cfg, name)?;
    match cli.command {
        Command::GenData => commands::gen_data(r),
        Command::FitCodebook => commands::fit_codebook_cmd(r),
        Command::TrainMusik => commands::train_musik(r),
        Command::TrainVoc { .. } => commands::train_voc(r),
        Command::TrainReward => commands::train_reward_cmd(r),
        Command::EvalOccupancy => commands::eval_occupancy(r),
        Command::EvalValue { .. } => commands::eval_value(r),
        Command::Rollout { start_state, steps } => commands::rollout_cmd(r, start_state, steps),
        Command::Mpc { .. } => commands::mpc(r),
        Command::Oracle { mdp, .. } => {
            let g = r.cfg.model.gamma;
            commands::oracle(r, &mdp, g)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
