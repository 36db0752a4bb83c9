use std::sync::Arc;

use voc_core::env::*;
use voc_core::occupancy::*;
use voc_core::oracle::*;
use voc_core::rng::{rng_for, streams};
use voc_core::tokenizer::*;
use voc_core::valuation::*;
use voc_core::VocError;

fn cycle() -> (MdpSpec, Vec<Vec<f64>>) {
    let mdp = MdpSpec::cycle(3, vec![0.0, 1.0, 0.0]).unwrap();
    let p = mdp.policy_transition(&PolicyMatrix::uniform(3, 1)).unwrap();
    (mdp, p)
}

fn trained_cycle(gamma: f64) -> TabularOccupancy {
    let data = vec![LatentTrajectory::from_states(
        &(0..3000).map(|t| t % 3).collect::<Vec<_>>(),
        false,
    )];
    let cfg = TrainConfig {
        gamma,
        steps: 50_000,
        log_every: 50_000,
        ..Default::default()
    };
    let m = TabularOccupancy::new(LatentLayout::states(3), gamma, cfg.tabular.clone()).unwrap();
    train_td(m, &data, &cfg).unwrap().model
}

fn exact_model(p: &[Vec<f64>], gamma: f64) -> TabularOccupancy {
    let mu = exact_occupancy_from_chain(p, gamma).unwrap();
    let rows: Vec<_> = (0..p.len())
        .map(|s| {
            let dist = (0..p.len())
                .map(|j| (state_latent(j), mu.row(s)[j]))
                .collect();
            (state_latent(s), dist)
        })
        .collect();
    TabularOccupancy::from_rows(LatentLayout::states(p.len()), gamma, &rows).unwrap()
}

#[test]
fn sampling_estimate_matches_the_exact_value() {
    let (mdp, _) = cycle();
    let exact = exact_value(&mdp, &PolicyMatrix::uniform(3, 1), 0.5).unwrap();
    assert!((exact[0] - 8.0 / 7.0).abs() < 1e-12);
    let model = trained_cycle(0.5);
    let r = TableReward::states(&mdp.reward);
    let mut rng = rng_for(0, streams::EVAL);
    let v = value_by_sampling(&model, &r, &state_latent(0), 10_000, &mut rng).unwrap();
    assert!((v.mean - exact[0]).abs() <= 0.05, "V(0) = {}", v.mean);
    assert_eq!(v.per_sample.len(), 10_000);
    let mean_r = v.per_sample.iter().sum::<f64>() / 10_000.0;
    assert!((v.mean - 2.0 * mean_r).abs() < 1e-12);
}

#[test]
fn monte_carlo_error_shrinks_with_samples() {
    let (mdp, p) = cycle();
    let exact = exact_value(&mdp, &PolicyMatrix::uniform(3, 1), 0.5).unwrap()[0];
    let model = exact_model(&p, 0.5);
    let r = TableReward::states(&mdp.reward);
    let wins = (0..10u64)
        .filter(|&seed| {
            let mut rng = rng_for(seed, streams::EVAL);
            let small = value_by_sampling(&model, &r, &state_latent(0), 100, &mut rng).unwrap();
            let large = value_by_sampling(&model, &r, &state_latent(0), 10_000, &mut rng).unwrap();
            (large.mean - exact).abs() < (small.mean - exact).abs()
        })
        .count();
    assert!(wins >= 9, "{wins}/10 seeds");
}

#[test]
fn gamma_zero_is_the_expected_next_reward_and_zero_reward_gives_zero() {
    let (_, p) = cycle();
    let model = exact_model(&p, 0.0);
    let mut rng = rng_for(1, streams::EVAL);
    let r = TableReward::states(&[0.0, 1.0, 0.0]);
    let v = value_by_sampling(&model, &r, &state_latent(0), 100, &mut rng).unwrap();
    assert_eq!(v.mean, 1.0);
    let zero = TableReward::states(&[0.0; 3]);
    let half = exact_model(&p, 0.5);
    assert_eq!(
        value_by_sampling(&half, &zero, &state_latent(0), 100, &mut rng)
            .unwrap()
            .mean,
        0.0
    );
    let futures: Vec<_> = [1, 2, 0].into_iter().map(state_latent).collect();
    let d = value_by_density(
        &half,
        &zero,
        &state_latent(0),
        &futures,
        3,
        DensityVariant::Raw,
    )
    .unwrap();
    assert_eq!(d.mean, 0.0);
}

#[test]
fn density_estimate_on_the_cycle_is_four_sevenths() {
    let model = trained_cycle(0.5);
    let r = TableReward::states(&[0.0, 1.0, 0.0]);
    let futures: Vec<_> = [1, 2, 0].into_iter().map(state_latent).collect();
    let v = value_by_density(
        &model,
        &r,
        &state_latent(0),
        &futures,
        3,
        DensityVariant::Raw,
    )
    .unwrap();
    assert!((v.mean - 4.0 / 7.0).abs() <= 0.05, "{}", v.mean);
    assert_eq!(v.count, 3);
    assert_eq!(v.zero_density_terms, 0);
    let empty = value_by_density(
        &model,
        &r,
        &state_latent(0),
        &futures,
        0,
        DensityVariant::Raw,
    )
    .unwrap();
    assert_eq!(empty.mean, 0.0);
    assert!(matches!(
        value_by_density(
            &model,
            &r,
            &state_latent(0),
            &futures,
            4,
            DensityVariant::Raw
        ),
        Err(VocError::InvalidInput(_))
    ));
}

#[test]
fn density_estimate_counts_repeats_unless_deduplicated() {
    let (_, p) = cycle();
    let model = exact_model(&p, 0.5);
    let r = TableReward::states(&[0.0, 1.0, 0.0]);
    let futures: Vec<_> = [1, 2, 0, 1, 2, 0].into_iter().map(state_latent).collect();
    let raw = value_by_density(
        &model,
        &r,
        &state_latent(0),
        &futures,
        6,
        DensityVariant::Raw,
    )
    .unwrap();
    let dedup = value_by_density(
        &model,
        &r,
        &state_latent(0),
        &futures,
        6,
        DensityVariant::DedupVisits,
    )
    .unwrap();
    assert!((raw.mean - 8.0 / 7.0).abs() < 1e-9);
    assert!((dedup.mean - 4.0 / 7.0).abs() < 1e-9);
    assert_eq!(dedup.per_sample.len(), 3);
}

#[test]
fn zero_density_terms_are_flagged() {
    let rows = vec![(state_latent(0), vec![(state_latent(1), 1.0)])];
    let model = TabularOccupancy::from_rows(LatentLayout::states(3), 0.5, &rows).unwrap();
    let r = TableReward::states(&[1.0, 1.0, 1.0]);
    let futures: Vec<_> = [1, 2].into_iter().map(state_latent).collect();
    let v = value_by_density(
        &model,
        &r,
        &state_latent(0),
        &futures,
        2,
        DensityVariant::Raw,
    )
    .unwrap();
    assert_eq!(v.mean, 1.0);
    assert_eq!(v.zero_density_terms, 1);
}

#[test]
fn both_estimators_agree_on_a_deterministic_cycle() {
    let p: Vec<Vec<f64>> = (0..4)
        .map(|s| {
            (0..4)
                .map(|j| if j == (s + 1) % 4 { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let gamma = 0.6;
    let model = exact_model(&p, gamma);
    let rw = [0.3, -1.0, 2.0, 0.5];
    let r = TableReward::states(&rw);
    let exact = exact_value_from_chain(&p, &rw, gamma).unwrap();
    let mut rng = rng_for(4, streams::EVAL);
    for s in 0..4 {
        let futures: Vec<_> = (1..=4).map(|k| state_latent((s + k) % 4)).collect();
        let d = value_by_density(
            &model,
            &r,
            &state_latent(s),
            &futures,
            4,
            DensityVariant::Raw,
        )
        .unwrap();
        let v = value_by_sampling(&model, &r, &state_latent(s), 20_000, &mut rng).unwrap();
        // density terms carry no 1/(1-gamma); scale them to value units to compare
        assert!((d.mean / (1.0 - gamma) - exact[s]).abs() < 1e-9);
        assert!((d.mean / (1.0 - gamma) - v.mean).abs() <= 0.05 * 2.0 / (1.0 - gamma));
    }
}

fn grid_setup() -> (GridWorld, Tokenizer, Vec<Trajectory>) {
    let env = GridWorld::new(GridConfig::default(), Pos::new(0, 0)).unwrap();
    let frames: Vec<Frame> = (0..25)
        .map(|s| env.with_state(s).unwrap().render())
        .collect();
    let fmap = RawPixels::new([10, 10, 1], [1, 1]).unwrap();
    let cb = fit_codebook(&frames, &fmap, 25, 0).unwrap();
    let tok = Tokenizer::new(cb, Arc::new(fmap), 1).unwrap();
    let ds = generate_dataset(&env, &Policy::UniformRandom, 60, 50, 2).unwrap();
    (env, tok, ds)
}

#[test]
fn sparse_goal_reward_is_learned() {
    let (_, tok, ds) = grid_setup();
    let fit = train_reward(&ds, &tok, &RewardConfig::default(), 0).unwrap();
    let val = fit.validation_mse.unwrap();
    assert!(val <= 0.01, "validation mse {val}");
    assert!(fit.curve.last().unwrap().loss < fit.curve[0].loss);
}

#[test]
fn constant_reward_is_fit_everywhere() {
    let (env, tok, mut ds) = grid_setup();
    for tr in &mut ds {
        tr.rewards.iter_mut().for_each(|r| *r = 0.7);
    }
    let fit = train_reward(&ds, &tok, &RewardConfig::default(), 3).unwrap();
    let support = GridSupport::new(&tok, &env).unwrap();
    let preds = fit
        .model
        .on_latents(&tok)
        .rewards(&support.latents)
        .unwrap();
    for p in preds {
        assert!((p - 0.7).abs() <= 0.01, "{p}");
    }
}

#[test]
fn reward_free_datasets_are_rejected() {
    let (_, tok, ds) = grid_setup();
    let bare: Vec<Trajectory> = ds
        .iter()
        .map(|t| Trajectory {
            frames: vec![t.frames[0].clone()],
            actions: vec![],
            rewards: vec![],
            state_ids: None,
        })
        .collect();
    assert!(matches!(
        train_reward(&bare, &tok, &RewardConfig::default(), 0),
        Err(VocError::UnsupportedDataset(_))
    ));
}

#[test]
fn reward_model_round_trips() {
    let (_, tok, ds) = grid_setup();
    let cfg = RewardConfig {
        epochs: 2,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    for hidden in [0, 16] {
        let fit = train_reward(
            &ds,
            &tok,
            &RewardConfig {
                hidden,
                ..cfg.clone()
            },
            1,
        )
        .unwrap();
        let path = dir.path().join(format!("r{hidden}.bin"));
        fit.model.save(&path).unwrap();
        let back = RewardModel::load(&path).unwrap();
        let x = tok.feature_reward_vector(&ds[0].frames[3]).unwrap();
        assert_eq!(
            back.predict(&[&x]).unwrap(),
            fit.model.predict(&[&x]).unwrap()
        );
    }
}

#[test]
fn error_summary_and_csvs() {
    let s = return_estimation_error(&[3, 4], &[1.0, 2.0], &[1.0, 2.5]).unwrap();
    assert_eq!(s.per_state[0].abs_error, 0.0);
    assert!((s.mean_abs_error - 0.25).abs() < 1e-12);
    assert_eq!(s.max_abs_error, 0.5);
    let mut csv = Vec::new();
    write_error_csv(&mut csv, &s).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("state_id,estimate,oracle,abs_error\n3,"));
    let est = ValueEstimate {
        mean: 1.0,
        count: 2,
        method: Method::Sampling,
        per_sample: vec![0.0, 1.0],
        zero_density_terms: 0,
    };
    let mut csv = Vec::new();
    write_return_distribution_csv(&mut csv, &[(7, &est)]).unwrap();
    assert_eq!(
        String::from_utf8(csv).unwrap(),
        "state_id,sample_index,reward\n7,0,0.0000000000\n7,1,1.0000000000\n"
    );
}
