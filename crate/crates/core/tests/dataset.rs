use voc_core::env::{
    generate_dataset, read_dataset, write_dataset, GridConfig, GridWorld, Policy, Pos, NUM_ACTIONS,
};
use voc_core::oracle::{stationary_distribution, tv_distance};

fn grid5() -> GridWorld {
    GridWorld::new(GridConfig::default(), Pos::new(0, 0)).unwrap()
}

fn bytes(trajs: &[voc_core::env::Trajectory]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, trajs).unwrap();
    buf
}

#[test]
fn same_seed_gives_identical_bytes() {
    let env = grid5();
    let a = generate_dataset(&env, &Policy::UniformRandom, 10, 20, 7).unwrap();
    let b = generate_dataset(&env, &Policy::UniformRandom, 10, 20, 7).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let c = generate_dataset(&env, &Policy::UniformRandom, 10, 20, 8).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn dataset_has_requested_shape() {
    let d = generate_dataset(&grid5(), &Policy::UniformRandom, 100, 20, 1).unwrap();
    assert_eq!(d.len(), 100);
    for t in &d {
        assert_eq!(t.frames.len(), 20);
        assert_eq!(t.actions.len(), 19);
        assert_eq!(t.rewards.len(), 19);
        t.validate().unwrap();
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let env = GridWorld::new(
        GridConfig {
            episodic: true,
            ..GridConfig::default()
        },
        Pos::new(0, 0),
    )
    .unwrap();
    let d = generate_dataset(
        &env,
        &Policy::EpsilonGreedyToGoal { epsilon: 0.3 },
        12,
        30,
        3,
    )
    .unwrap();
    let first = bytes(&d);
    let back = read_dataset(first.as_slice()).unwrap();
    assert_eq!(back, d);
    assert_eq!(bytes(&back), first);
}

#[test]
fn visit_distribution_matches_stationary() {
    let env = grid5();
    let d = generate_dataset(&env, &Policy::UniformRandom, 200, 200, 11).unwrap();
    let mut counts = vec![0.0; env.n_states()];
    for t in &d {
        for s in t.state_ids.as_ref().unwrap() {
            counts[*s] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let empirical: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let pi = Policy::UniformRandom.as_matrix(&env).unwrap();
    let p = env.as_mdp().policy_transition(&pi).unwrap();
    let stationary = stationary_distribution(&p, 10_000, 1e-14);
    let tv = tv_distance(&empirical, &stationary).unwrap();
    assert!(tv <= 0.05, "tv {tv}");
}

#[test]
fn transition_frequencies_match_mdp() {
    let env = grid5();
    let mdp = env.as_mdp();
    let d = generate_dataset(&env, &Policy::UniformRandom, 2000, 200, 5).unwrap();
    let n = env.n_states();
    let mut counts = vec![vec![0.0; n]; n * NUM_ACTIONS];
    for t in &d {
        let ids = t.state_ids.as_ref().unwrap();
        for (i, a) in t.actions.iter().enumerate() {
            counts[ids[i] * NUM_ACTIONS + a][ids[i + 1]] += 1.0;
        }
    }
    for s in 0..n {
        for a in 0..NUM_ACTIONS {
            let row = &counts[s * NUM_ACTIONS + a];
            let total: f64 = row.iter().sum();
            assert!(total >= 2000.0, "only {total} samples for ({s},{a})");
            let freq: Vec<f64> = row.iter().map(|c| c / total).collect();
            let tv = tv_distance(&freq, mdp.row(s, a)).unwrap();
            assert!(tv <= 0.03, "({s},{a}) tv {tv}");
        }
    }
}
