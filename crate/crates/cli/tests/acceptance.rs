//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line with the measured numbers. Tolerances are pinned below.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use voc_core::control::*;
use voc_core::env::*;
use voc_core::occupancy::*;
use voc_core::oracle::*;
use voc_core::rng::{rng_for, streams};
use voc_core::tokenizer::*;
use voc_core::valuation::*;
use voc_tensor::gradcheck::{self, GradCheckReport};
use voc_tensor::nn::{Embedding, LayerNorm, Linear, Mlp, Transformer, TransformerConfig};
use voc_tensor::{Activation, Graph, ParamStore, Tensor, Var};

const FIXED_POINT_TV: f64 = 0.02;
const FIXED_POINT_BUDGET: Duration = Duration::from_secs(60);
const TD_UPDATES: u64 = 50_000;
const GAMMA_ZERO_TV: f64 = 0.01;
const K_STEP_TV: f64 = 0.02;
const GRADCHECK_TOL: f64 = 1e-4;
const VALUE_TOL: f64 = 0.05;
const MC_WINS: usize = 9;
const DENSITY_TOL: f64 = 0.05;
const SPEARMAN_MIN: f64 = 0.9;
const MIN_CONDITIONING_STATES: usize = 20;
const CORRIDOR_ACCURACY: f64 = 0.9;
const GRID_ACCURACY_OVER_CHANCE: f64 = 0.2;

/// Writes straight to the process stdout so the line survives test capture.
fn report(id: &str, title: &str, pass: bool, detail: String) {
    let line = format!(
        "{} criterion {id}: {title} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{line}");
}

fn cycle_mdp() -> MdpSpec {
    MdpSpec::cycle(3, vec![0.0, 1.0, 0.0]).unwrap()
}

fn chain(mdp: &MdpSpec) -> Vec<Vec<f64>> {
    mdp.policy_transition(&PolicyMatrix::uniform(mdp.n_states, 1))
        .unwrap()
}

fn cycle_data() -> Vec<LatentTrajectory> {
    vec![LatentTrajectory::from_states(
        &(0..3000).map(|t| t % 3).collect::<Vec<_>>(),
        false,
    )]
}

fn chain_data(p: &[Vec<f64>], n_traj: usize, len: usize, seed: u64) -> Vec<LatentTrajectory> {
    let mdp = MdpSpec::from_chain(p.to_vec(), vec![0.0; p.len()]).unwrap();
    let pi = PolicyMatrix::uniform(p.len(), 1);
    let mut rng = rng_for(seed, 0);
    (0..n_traj)
        .map(|i| {
            LatentTrajectory::from_states(
                &sample_chain(&mdp, &pi, i % p.len(), len, &mut rng).unwrap(),
                false,
            )
        })
        .collect()
}

fn tabular_cfg(gamma: f64, k_max: usize) -> TrainConfig {
    TrainConfig {
        gamma,
        k_max,
        steps: TD_UPDATES,
        log_every: TD_UPDATES,
        seed: 7,
        ..Default::default()
    }
}

fn train_tabular(
    layout: LatentLayout,
    data: &[LatentTrajectory],
    cfg: &TrainConfig,
) -> TabularOccupancy {
    let m = TabularOccupancy::new(layout, cfg.gamma, cfg.tabular.clone()).unwrap();
    train_td(m, data, cfg).unwrap().model
}

fn state_row(model: &dyn OccupancyModel, s: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            model
                .log_density(&state_latent(s), &state_latent(j))
                .unwrap()
                .exp()
        })
        .collect()
}

fn grid() -> GridWorld {
    GridWorld::new(GridConfig::default(), Pos::new(0, 0)).unwrap()
}

fn state_frames(env: &GridWorld) -> Vec<Frame> {
    (0..env.n_states())
        .map(|s| env.with_state(s).unwrap().render())
        .collect()
}

/// Raw-pixel tokenizer over a `patch_grid` tiling, k-means fit on every state's frame.
fn pixel_tokenizer(env: &GridWorld, patch_grid: [usize; 2], k: usize) -> Tokenizer {
    let frames = state_frames(env);
    let (h, w, c) = frames[0].shape();
    let fmap = RawPixels::new([h, w, c], patch_grid).unwrap();
    let cb = fit_codebook(&frames, &fmap, k, 0).unwrap();
    Tokenizer::new(cb, Arc::new(fmap), 1).unwrap()
}

fn latents(tok: &Tokenizer, ds: &[Trajectory]) -> Vec<LatentTrajectory> {
    ds.iter()
        .map(|t| LatentTrajectory {
            latents: tok.trajectory_latents(&t.frames).unwrap(),
            terminal: false,
        })
        .collect()
}

fn neural_cfg(gamma: f64, steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        gamma,
        steps,
        batch_size: 128,
        ema_decay: 0.99,
        log_every: steps,
        seed,
        neural: NeuralConfig {
            width: 32,
            heads: 4,
            blocks: 2,
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn criterion_01_occupancy_fixed_point() {
    let p = chain(&cycle_mdp());
    // independent oracle: from state 0 the chain visits 1, 2, 0 after 1, 2, 3 steps,
    // so mu(j|0) is a geometric series with ratio gamma^3
    let g: f64 = 0.5;
    let hand = [g * g, 1.0, g].map(|w| (1.0 - g) * w / (1.0 - g.powi(3)));
    let solved = exact_occupancy_from_chain(&p, 0.5).unwrap();
    let oracle_ok = (0..3).all(|j| (solved.row(0)[j] - hand[j]).abs() < 1e-12)
        && (hand[0] - 1.0 / 7.0).abs() < 1e-12
        && (hand[1] - 4.0 / 7.0).abs() < 1e-12;
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for gamma in [0.0, 0.5, 0.9] {
        let model = train_tabular(
            LatentLayout::states(3),
            &cycle_data(),
            &tabular_cfg(gamma, 1),
        );
        let mu = exact_occupancy_from_chain(&p, gamma).unwrap();
        for s in 0..3 {
            worst = worst.max(tv_distance(&state_row(&model, s, 3), mu.row(s)).unwrap());
        }
    }
    let elapsed = t0.elapsed();
    report(
        "1",
        "tabular 3-cycle fixed point",
        oracle_ok && worst <= FIXED_POINT_TV && elapsed < FIXED_POINT_BUDGET,
        format!(
            "worst TV {worst:.4} <= {FIXED_POINT_TV} over gamma {{0, 0.5, 0.9}} after {TD_UPDATES} TD updates; \
             {:.1}s < {}s; mu(.|0) at 0.5 = {:.6?}",
            elapsed.as_secs_f64(),
            FIXED_POINT_BUDGET.as_secs(),
            solved.row(0)
        ),
    );
}

#[test]
fn criterion_02_gamma_zero_degeneracy() {
    let env = grid();
    let tok = pixel_tokenizer(&env, [1, 1], 25);
    let ds = generate_dataset(&env, &Policy::UniformRandom, 100, 100, 3).unwrap();
    let data = latents(&tok, &ds);
    let mut counts: HashMap<LatentState, BTreeMap<LatentState, f64>> = HashMap::new();
    for tr in &data {
        for w in tr.latents.windows(2) {
            *counts
                .entry(w[0].clone())
                .or_default()
                .entry(w[1].clone())
                .or_default() += 1.0;
        }
    }
    let n_windows: usize = data.iter().map(|t| t.latents.len() - 1).sum();
    // whole passes with 1/n step sizes make each row the running average of its targets
    let cfg = TrainConfig {
        sampling: Sampling::Epochs,
        batch_size: 30,
        steps: (20 * n_windows / 30) as u64,
        tabular: TabularConfig {
            step_size: StepSize::Polynomial {
                lr0: 1.0,
                power: 1.0,
            },
        },
        ..tabular_cfg(0.0, 1)
    };
    let model = train_tabular(tok.layout(), &data, &cfg);
    let mut worst: f64 = 0.0;
    for (cond, next) in &counts {
        let total: f64 = next.values().sum();
        let mut on_support = 0.0;
        let mut l1 = 0.0;
        for (z, c) in next {
            let p = model.log_density(cond, z).unwrap().exp();
            on_support += p;
            l1 += (p - c / total).abs();
        }
        worst = worst.max(0.5 * (l1 + (1.0 - on_support).max(0.0)));
    }
    report(
        "2",
        "gamma=0 recovers the empirical next-latent distribution",
        worst <= GAMMA_ZERO_TV,
        format!(
            "worst TV {worst:.2e} <= {GAMMA_ZERO_TV} over {} visited rows",
            counts.len()
        ),
    );
}

#[test]
fn criterion_03_k_step_consistency() {
    let noisy = vec![
        vec![0.1, 0.6, 0.3, 0.0],
        vec![0.0, 0.2, 0.4, 0.4],
        vec![0.5, 0.0, 0.0, 0.5],
        vec![0.3, 0.3, 0.2, 0.2],
    ];
    let mut worst: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for p in [chain(&cycle_mdp()), noisy] {
        let n = p.len();
        let data = chain_data(&p, 10, 3000, 5);
        let mu = exact_occupancy_from_chain(&p, 0.9).unwrap();
        let base = train_tabular(LatentLayout::states(n), &data, &tabular_cfg(0.9, 1));
        for k_max in [2, 3] {
            let other = train_tabular(LatentLayout::states(n), &data, &tabular_cfg(0.9, k_max));
            for s in 0..n {
                let r = state_row(&other, s, n);
                worst = worst.max(tv_distance(&state_row(&base, s, n), &r).unwrap());
                worst_oracle = worst_oracle.max(tv_distance(&r, mu.row(s)).unwrap());
            }
        }
    }
    report(
        "3",
        "k-step TD shares the TD(1) fixed point",
        worst <= K_STEP_TV,
        format!("worst TV to TD(1) {worst:.4} <= {K_STEP_TV} for k_max {{2, 3}}, gamma 0.9 (to oracle {worst_oracle:.4})"),
    );
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let w = g.input(Tensor::randn(shape, 1.0, &mut rng_for(seed, 0)));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn criterion_04_gradient_checks() {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();
    let mut r = rng_for(11, 0);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, 0.5, true, &mut r);
    let x = store.add("x", Tensor::randn(vec![5, 4], 1.0, &mut r), false);
    let rep = gradcheck::check(&mut store, H, FLOOR, |g, s| {
        let xv = g.param(s, x);
        let y = lin.forward(g, s, xv)?;
        Ok(weighted_sum(g, y, 1))
    });
    results.push(("linear", rep.unwrap()));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    for v in store.get_mut(ln.gamma).data_mut() {
        *v += 0.3;
    }
    let x = store.add("x", Tensor::randn(vec![3, 6], 2.0, &mut r), false);
    let rep = gradcheck::check(&mut store, H, FLOOR, |g, s| {
        let xv = g.param(s, x);
        let y = ln.forward(g, s, xv)?;
        Ok(weighted_sum(g, y, 2))
    });
    results.push(("layer-norm", rep.unwrap()));

    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "emb", 5, 3, 1.0, &mut r);
    let rep = gradcheck::check(&mut store, H, FLOOR, |g, s| {
        let y = emb.forward(g, s, &[4, 0, 4, 2])?;
        Ok(weighted_sum(g, y, 3))
    });
    results.push(("embedding", rep.unwrap()));

    let mut store = ParamStore::new();
    let q = store.add("q", Tensor::randn(vec![8, 6], 1.0, &mut r), false);
    let k = store.add("k", Tensor::randn(vec![8, 6], 1.0, &mut r), false);
    let v = store.add("v", Tensor::randn(vec![8, 6], 1.0, &mut r), false);
    let rep = gradcheck::check(&mut store, H, FLOOR, |g, s| {
        let (qv, kv, vv) = (g.param(s, q), g.param(s, k), g.param(s, v));
        let y = g.causal_attention(qv, kv, vv, 2, 4)?;
        let y = g.softmax(y)?;
        Ok(weighted_sum(g, y, 4))
    });
    results.push(("attention+softmax", rep.unwrap()));

    for (act, name) in [
        (Activation::Gelu, "gelu"),
        (Activation::Tanh, "tanh"),
        (Activation::Relu, "relu"),
    ] {
        let mut store = ParamStore::new();
        let x = store.add(
            "x",
            Tensor::new(vec![2, 3], vec![-1.3, -0.4, 0.2, 0.7, 1.9, -2.2]).unwrap(),
            false,
        );
        let rep = gradcheck::check(&mut store, H, FLOOR, |g, s| {
            let xv = g.param(s, x);
            let y = g.activation(xv, act);
            Ok(weighted_sum(g, y, 5))
        });
        results.push((name, rep.unwrap()));
    }

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", 5, 7, 3, Activation::Tanh, &mut r);
    let a = store.add("a", Tensor::randn(vec![3, 2], 1.0, &mut r), false);
    let b = store.add("b", Tensor::randn(vec![3, 3], 1.0, &mut r), false);
    let rep = gradcheck::check(&mut store, H, FLOOR, |g, s| {
        let (av, bv) = (g.param(s, a), g.param(s, b));
        let x = g.concat(av, bv)?;
        let y = mlp.forward(g, s, x)?;
        g.cross_entropy(y, &[Some(0), Some(2), Some(1)])
    });
    results.push(("concat+mlp+cross-entropy", rep.unwrap()));
    let rep = gradcheck::check(&mut store, H, FLOOR, |g, s| {
        let av = g.param(s, a);
        g.mse(av, &[0.5; 6])
    });
    results.push(("mse", rep.unwrap()));

    let mut store = ParamStore::new();
    let cfg = TransformerConfig {
        vocab: 7,
        context: 6,
        width: 8,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
    };
    let model = Transformer::new(cfg, &mut store, &mut r).unwrap();
    for (i, p) in store.iter_mut().enumerate() {
        if p.decay {
            p.value = Tensor::randn(p.value.shape().to_vec(), 0.3, &mut rng_for(i as u64, 1));
        }
    }
    let batch = vec![vec![1, 3, 5, 0, 2, 6], vec![4, 4, 1, 2, 3, 0]];
    let targets: Vec<Option<usize>> = [None, None, Some(0), Some(2), Some(6), Some(1)]
        .into_iter()
        .chain([None, None, Some(2), Some(3), Some(0), Some(5)])
        .collect();
    let rep = gradcheck::check(&mut store, H, FLOOR, |g, s| {
        let logits = model.logits(g, s, &batch)?;
        g.cross_entropy(logits, &targets)
    });
    results.push(("2-block transformer", rep.unwrap()));

    let worst = results
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    let pass = results
        .iter()
        .all(|(_, r)| r.checked > 0 && r.max_rel_error <= GRADCHECK_TOL);
    report(
        "4",
        "central finite-difference gradient checks",
        pass,
        format!(
            "{} checks, worst relative error {:.2e} ({}) <= {GRADCHECK_TOL:.0e}",
            results.len(),
            worst.1.max_rel_error,
            worst.0
        ),
    );
}

fn exact_cycle_model(gamma: f64) -> TabularOccupancy {
    let p = chain(&cycle_mdp());
    let mu = exact_occupancy_from_chain(&p, gamma).unwrap();
    let rows: Vec<_> = (0..3)
        .map(|s| {
            (
                state_latent(s),
                (0..3).map(|j| (state_latent(j), mu.row(s)[j])).collect(),
            )
        })
        .collect();
    TabularOccupancy::from_rows(LatentLayout::states(3), gamma, &rows).unwrap()
}

#[test]
fn criterion_05_sampled_value_accuracy() {
    let mdp = cycle_mdp();
    let exact = exact_value(&mdp, &PolicyMatrix::uniform(3, 1), 0.5).unwrap()[0];
    // independent oracle: reward 1 arrives after 1, 4, 7, ... steps
    let hand = 1.0 / (1.0 - 0.5f64.powi(3));
    let r = TableReward::states(&mdp.reward);
    let trained = train_tabular(LatentLayout::states(3), &cycle_data(), &tabular_cfg(0.5, 1));
    let v = value_by_sampling(
        &trained,
        &r,
        &state_latent(0),
        10_000,
        &mut rng_for(0, streams::EVAL),
    )
    .unwrap()
    .mean;
    let exact_model = exact_cycle_model(0.5);
    let wins = (0..10u64)
        .filter(|&seed| {
            let mut rng = rng_for(seed, streams::EVAL);
            let small =
                value_by_sampling(&exact_model, &r, &state_latent(0), 100, &mut rng).unwrap();
            let large =
                value_by_sampling(&exact_model, &r, &state_latent(0), 10_000, &mut rng).unwrap();
            (large.mean - exact).abs() < (small.mean - exact).abs()
        })
        .count();
    report(
        "5",
        "sampled value on the 3-cycle",
        (exact - hand).abs() < 1e-12 && (v - 8.0 / 7.0).abs() <= VALUE_TOL && wins >= MC_WINS,
        format!(
            "V(0) = {v:.4} vs 8/7 = {:.4} (tol {VALUE_TOL}); MC error shrinks 1e2 -> 1e4 on {wins}/10 seeds (need {MC_WINS})",
            8.0 / 7.0
        ),
    );
}

#[test]
fn criterion_06_density_value_consistency() {
    let model = train_tabular(LatentLayout::states(3), &cycle_data(), &tabular_cfg(0.5, 1));
    let r = TableReward::states(&[0.0, 1.0, 0.0]);
    let futures: Vec<_> = [1, 2, 0].into_iter().map(state_latent).collect();
    let d = value_by_density(
        &model,
        &r,
        &state_latent(0),
        &futures,
        3,
        DensityVariant::Raw,
    )
    .unwrap()
    .mean;
    let cycle_ok = (d - 4.0 / 7.0).abs() <= DENSITY_TOL;

    let env = grid();
    let tok = pixel_tokenizer(&env, [2, 2], 38);
    let policy = Policy::EpsilonGreedyToGoal { epsilon: 0.3 };
    let ds = generate_dataset(&env, &policy, 100, 100, 1).unwrap();
    let rm = train_reward(&ds, &tok, &RewardConfig::default(), 0)
        .unwrap()
        .model
        .on_latents(&tok);
    let gm = train_tabular(tok.layout(), &latents(&tok, &ds), &tabular_cfg(0.9, 1));
    let (m, horizon) = (10, 20);
    let (mut sampled, mut raw, mut dedup) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..env.n_states() {
        let start = env.with_state(s).unwrap();
        let z = tok.encode(&[&start.render()]).unwrap();
        let mut rng = rng_for(0, streams::EVAL + s as u64);
        sampled.push(
            value_by_sampling(&gm, &rm, &z, 10_000, &mut rng)
                .unwrap()
                .mean,
        );
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..m {
            let tr = rollout_from(&start, &policy, horizon + 1, &mut rng).unwrap();
            let lat = tok.trajectory_latents(&tr.frames).unwrap();
            a += value_by_density(&gm, &rm, &z, &lat[1..], horizon, DensityVariant::Raw)
                .unwrap()
                .mean;
            b += value_by_density(
                &gm,
                &rm,
                &z,
                &lat[1..],
                horizon,
                DensityVariant::DedupVisits,
            )
            .unwrap()
            .mean;
        }
        raw.push(a / m as f64);
        dedup.push(b / m as f64);
    }
    let rho = spearman(&sampled, &raw).unwrap();
    let rho_dedup = spearman(&sampled, &dedup).unwrap();
    report(
        "6",
        "density value on the 3-cycle and ranking agreement on the grid",
        cycle_ok && rho >= SPEARMAN_MIN,
        format!(
            "T=3 density value {d:.4} vs 4/7 = {:.4} (tol {DENSITY_TOL}); grid Spearman raw {rho:.3} >= {SPEARMAN_MIN} \
             (dedup {rho_dedup:.3}) over 25 states, {m} validation trajectories each",
            4.0 / 7.0
        ),
    );
}

#[test]
fn criterion_07_compounding_error_direction() {
    let env = grid();
    let tok = pixel_tokenizer(&env, [1, 1], 25);
    let ds = generate_dataset(&env, &Policy::UniformRandom, 100, 100, 1).unwrap();
    let data = latents(&tok, &ds);
    let be = backend("neural").unwrap();
    // equal budgets for both models
    let (one_step, gamma_model) = std::thread::scope(|sc| {
        let a = sc.spawn(|| {
            be.train(tok.layout(), &data, &neural_cfg(0.0, 5000, 0))
                .unwrap()
                .0
        });
        let b = sc.spawn(|| {
            be.train(tok.layout(), &data, &neural_cfg(0.9, 5000, 0))
                .unwrap()
                .0
        });
        (a.join().unwrap(), b.join().unwrap())
    });
    let n = env.n_states();
    let support = GridSupport::new(&tok, &env).unwrap();
    let dist = |m: &dyn OccupancyModel, s: usize| {
        let z = support.still(&tok, &env, s).unwrap();
        support.to_states(&density_over_support(m, &z, &support.latents).unwrap().probs)
    };
    let p_hat: Vec<Vec<f64>> = (0..n).map(|s| dist(one_step.as_ref(), s)).collect();
    let mdp = env.as_mdp();
    let pi = PolicyMatrix::uniform(n, NUM_ACTIONS);
    let oracle = exact_occupancy(&mdp, &pi, 0.9).unwrap();
    // mixture of k-step predictions, k = 1..10, renormalized over the truncated weights
    let horizon = 10;
    let compose = |p: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let norm = 1.0 - 0.9f64.powi(horizon);
        let mut acc = vec![vec![0.0; n]; n];
        let mut pk = p.to_vec();
        for k in 1..=horizon {
            let w = 0.1 * 0.9f64.powi(k - 1) / norm;
            for (a, row) in acc.iter_mut().zip(&pk) {
                for (x, y) in a.iter_mut().zip(row) {
                    *x += w * y;
                }
            }
            pk = mat_mul(&pk, p);
        }
        acc
    };
    let composed = compose(&p_hat);
    let floor_rows = compose(&mdp.policy_transition(&pi).unwrap());
    let mean_tv = |rows: &dyn Fn(usize) -> Vec<f64>| -> f64 {
        (0..n)
            .map(|s| tv_distance(&rows(s), oracle.row(s)).unwrap())
            .sum::<f64>()
            / n as f64
    };
    let single = mean_tv(&|s| dist(gamma_model.as_ref(), s));
    let multi = mean_tv(&|s| composed[s].clone());
    let floor = mean_tv(&|s| floor_rows[s].clone());
    report(
        "7",
        "single-pass gamma-model vs composed one-step model",
        n >= MIN_CONDITIONING_STATES && single <= multi,
        format!(
            "mean TV to oracle over {n} states: gamma=0.9 single pass {single:.4} <= gamma=0 composed to H={horizon} \
             {multi:.4} (truncation floor with the true P: {floor:.4})"
        ),
    );
}

#[test]
fn criterion_08_codebook_size_sweep() {
    let env = grid();
    let enc_data = generate_dataset(&env, &Policy::UniformRandom, 200, 50, 1).unwrap();
    let enc = train_inverse_dynamics(&enc_data, &InverseDynamicsConfig::default(), 0)
        .unwrap()
        .encoder;
    let features = InverseDynamicsFeatures::new(Arc::new(enc));
    let ds = generate_dataset(&env, &Policy::UniformRandom, 100, 100, 2).unwrap();
    let frames: Vec<Frame> = ds.iter().flat_map(|t| t.frames.iter().cloned()).collect();
    let toks: Vec<(usize, Tokenizer)> = [4, 16, 64]
        .into_iter()
        .map(|k| {
            let cb = fit_codebook(&frames, &features, k, 0).unwrap();
            (
                k,
                Tokenizer::new(cb, Arc::new(features.clone()), 1).unwrap(),
            )
        })
        .collect();
    // the regressor reads pre-quantization features, so one fit serves every K
    let reward = train_reward(&ds, &toks[2].1, &RewardConfig::default(), 0)
        .unwrap()
        .model;
    let mdp = env.as_mdp();
    let exact = exact_value(&mdp, &PolicyMatrix::uniform(mdp.n_states, NUM_ACTIONS), 0.9).unwrap();
    let ids: Vec<usize> = (0..env.n_states()).collect();
    let mut errors = Vec::new();
    for (k, tok) in &toks {
        let model = train_tabular(tok.layout(), &latents(tok, &ds), &tabular_cfg(0.9, 1));
        let rm = reward.on_latents(tok);
        let est: Vec<f64> = ids
            .iter()
            .map(|&s| {
                let z = tok.encode(&[&env.with_state(s).unwrap().render()]).unwrap();
                let mut rng = rng_for(0, streams::EVAL + s as u64);
                value_by_sampling(&model, &rm, &z, 10_000, &mut rng)
                    .unwrap()
                    .mean
            })
            .collect();
        errors.push((
            *k,
            return_estimation_error(&ids, &est, &exact)
                .unwrap()
                .mean_abs_error,
        ));
    }
    let sweep: Vec<String> = errors
        .iter()
        .map(|(k, e)| format!("K={k}: {e:.4}"))
        .collect();
    report(
        "8",
        "codebook-size sweep with the inverse-dynamics tokenizer",
        errors[2].1 <= errors[0].1,
        format!("mean |V - V*| {}; K=64 <= K=4", sweep.join(", ")),
    );
}

fn mpc_means(
    env: &GridWorld,
    tok: &Tokenizer,
    ds: &[Trajectory],
    buffer: &[usize],
    start: Option<(usize, usize)>,
) -> BTreeMap<&'static str, f64> {
    let cfg = neural_cfg(0.9, 3000, 0);
    let be = backend("neural").unwrap();
    let (model, _) = be.train(tok.layout(), &latents(tok, ds), &cfg).unwrap();
    let reward = train_reward(ds, tok, &RewardConfig::default(), 0)
        .unwrap()
        .model;
    let ctx = ScorerContext {
        model: Some(Arc::from(model)),
        init_model: Some(Arc::from(be.init(tok.layout(), &cfg).unwrap())),
        reward: Some(Arc::new(reward.on_latents(tok))),
        n_value_samples: 100,
        oracle: None,
    };
    let mpc = MpcConfig {
        start,
        ..Default::default()
    };
    assert_eq!(
        (mpc.n_episodes, mpc.episode_len, buffer.len()),
        (20, 20, 100)
    );
    ["voc", "no-model", "init-model", "no-lookahead"]
        .into_iter()
        .map(|m| {
            let scorer = build_scorer(m, &ctx).unwrap();
            (
                m,
                run_mpc(env, tok, scorer.as_ref(), buffer, &mpc, 0)
                    .unwrap()
                    .summary
                    .mean,
            )
        })
        .collect()
}

#[test]
fn criterion_09_mpc_ordering() {
    let (grid_means, corridor_means) = std::thread::scope(|sc| {
        let g = sc.spawn(|| {
            let env = grid();
            let tok = pixel_tokenizer(&env, [1, 1], 25);
            let ds = generate_dataset(
                &env,
                &Policy::EpsilonGreedyToGoal { epsilon: 0.3 },
                100,
                100,
                1,
            )
            .unwrap();
            let actions: Vec<usize> = ds.iter().flat_map(|t| t.actions.clone()).collect();
            let buffer =
                build_candidate_buffer(CandidateSource::Dataset(&actions), 100, 0).unwrap();
            mpc_means(&env, &tok, &ds, &buffer, None)
        });
        let c = sc.spawn(|| {
            // the goal sits five moves from the start, so reward is delayed
            let env = GridWorld::corridor(6, 2, 0).unwrap();
            let tok = pixel_tokenizer(&env, [1, 1], 6);
            let ds = generate_dataset(&env, &Policy::UniformRandom, 100, 50, 1).unwrap();
            let buffer: Vec<usize> = (0..100)
                .map(|i| if i % 2 == 0 { LEFT } else { RIGHT })
                .collect();
            mpc_means(&env, &tok, &ds, &buffer, Some((0, 0)))
        });
        (g.join().unwrap(), c.join().unwrap())
    });
    let g = &grid_means;
    let c = &corridor_means;
    report(
        "9",
        "MPC return ordering",
        g["voc"] > g["no-model"] && g["voc"] > g["init-model"] && c["voc"] >= c["no-lookahead"],
        format!(
            "grid mean return voc {:.2} > no-model {:.2}, > init-model {:.2} (no-lookahead {:.2}); \
             corridor voc {:.2} >= no-lookahead {:.2}",
            g["voc"], g["no-model"], g["init-model"], g["no-lookahead"], c["voc"], c["no-lookahead"]
        ),
    );
}

fn run_cli(dir: &Path, config: &str, cmds: &[&str]) {
    std::fs::write(dir.join("config.json"), config).unwrap();
    for cmd in cmds {
        let out = Command::new(env!("CARGO_BIN_EXE_voc"))
            .current_dir(dir)
            .args(["--config", "config.json", cmd])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn criterion_10_determinism() {
    let tabular = r#"{
        "env": {"n_traj": 40, "traj_len": 50},
        "model": {"steps": 5000, "log_every": 500},
        "reward": {"epochs": 10},
        "valuation": {"n_samples": 1000, "trajectories_per_state": 2, "horizon": 10},
        "mpc": {"n_episodes": 4, "n_value_samples": 20, "methods": ["voc", "no-model", "init-model", "no-lookahead", "oracle"]},
        "output_dir": "run"
    }"#;
    let neural = r#"{
        "env": {"n_traj": 20, "traj_len": 30, "policy": {"kind": "uniform-random"}},
        "tokenizer": {"feature_map": "inverse-dynamics", "k": 16, "inverse_dynamics": {"epochs": 3}},
        "model": {"backend": "neural", "steps": 60, "log_every": 20, "batch_size": 16,
                  "neural": {"width": 16, "heads": 2, "warmup_steps": 10}},
        "reward": {"epochs": 5},
        "valuation": {"n_samples": 50, "trajectories_per_state": 1, "horizon": 5},
        "mpc": {"n_episodes": 2, "episode_len": 5, "n_value_samples": 5},
        "output_dir": "run"
    }"#;
    let stages = [
        "gen-data",
        "fit-codebook",
        "train-voc",
        "train-reward",
        "eval-occupancy",
        "eval-value",
        "rollout",
        "mpc",
    ];
    let neural_stages = [
        "gen-data",
        "train-musik",
        "fit-codebook",
        "train-voc",
        "train-reward",
        "eval-occupancy",
        "eval-value",
        "mpc",
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for (cfg, cmds) in [(tabular, &stages), (neural, &neural_stages)] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_cli(a.path(), cfg, cmds);
        run_cli(b.path(), cfg, cmds);
        let (fa, fb) = (
            dir_bytes(&a.path().join("run")),
            dir_bytes(&b.path().join("run")),
        );
        if fa.keys().ne(fb.keys()) {
            differing.push("file set".to_string());
        }
        for (name, bytes) in &fa {
            compared += 1;
            if fb.get(name) != Some(bytes) {
                differing.push(name.clone());
            }
        }
    }
    report(
        "10",
        "byte-identical reruns of every pipeline stage",
        differing.is_empty() && compared > 0,
        format!(
            "{compared} artifacts and CSVs compared across two pipelines; differing: {differing:?}"
        ),
    );
}

fn corridor_data(n_traj: usize, seed: u64) -> Vec<Trajectory> {
    // only left and right move the agent in a one-row world
    let mut rng = rng_for(seed, 99);
    let actions: Vec<usize> = (0..64)
        .map(|_| [LEFT, RIGHT][sample_index(&[0.5, 0.5], &mut rng)])
        .collect();
    let env = GridWorld::corridor(8, 2, 0).unwrap();
    generate_dataset(
        &env,
        &Policy::FixedActionSequence { actions },
        n_traj,
        24,
        seed,
    )
    .unwrap()
}

#[test]
fn criterion_11_inverse_dynamics_accuracy() {
    let corridor_cfg = InverseDynamicsConfig {
        k_max: 1,
        ..InverseDynamicsConfig::default()
    };
    let corridor = train_inverse_dynamics(&corridor_data(40, 1), &corridor_cfg, 0)
        .unwrap()
        .encoder;
    let corridor_acc = corridor.action_accuracy(&corridor_data(20, 2), 1).unwrap();

    let env = grid();
    let grid_cfg = InverseDynamicsConfig::default();
    let train = generate_dataset(&env, &Policy::UniformRandom, 200, 50, 1).unwrap();
    let held_out = generate_dataset(&env, &Policy::UniformRandom, 50, 50, 2).unwrap();
    let enc = train_inverse_dynamics(&train, &grid_cfg, 0)
        .unwrap()
        .encoder;
    let grid_acc = enc.action_accuracy(&held_out, grid_cfg.k_max).unwrap();
    let chance = 1.0 / NUM_ACTIONS as f64;
    report(
        "11",
        "inverse-dynamics held-out action accuracy",
        corridor_acc > CORRIDOR_ACCURACY && grid_acc > chance + GRID_ACCURACY_OVER_CHANCE,
        format!(
            "corridor (k_max=1) {corridor_acc:.3} > {CORRIDOR_ACCURACY}; grid (k_max={}) {grid_acc:.3} > {:.2}",
            grid_cfg.k_max,
            chance + GRID_ACCURACY_OVER_CHANCE
        ),
    );
}
