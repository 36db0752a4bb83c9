use std::io::Write;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use voc_core::control::{
    build_candidate_buffer, build_scorer, run_mpc, write_results_csv, write_summary_csv,
    CandidateSource, MpcRun, OracleValue, ScorerContext,
};
use voc_core::env::{
    generate_dataset, rollout_from, write_dataset, Frame, GridWorld, MdpSpec, PolicyMatrix,
    Trajectory,
};
use voc_core::occupancy::{
    backend, density_over_support, rollout, write_training_log, GridSupport, LatentTrajectory,
};
use voc_core::oracle::{
    exact_occupancy, exact_occupancy_from_chain, exact_value, tv_distance, write_matrix_csv,
};
use voc_core::rng::{rng_for, streams};
use voc_core::tokenizer::{
    fit_codebook, train_inverse_dynamics, FeatureMap, FrozenRandom, InverseDynamicsFeatures,
    RawPixels, Reconstruction, Tokenizer,
};
use voc_core::valuation::{
    return_estimation_error, spearman, train_reward, value_by_density, value_by_sampling,
    write_error_csv, write_return_distribution_csv, LatentReward, ValueEstimate,
};
use voc_core::VocError;
use voc_tensor::write_curve_csv;

use crate::artifacts::{Run, CODEBOOK, DATASET, ENCODER, MODEL, REWARD};
use crate::config::FeatureKind;

pub fn gen_data(mut run: Run) -> Result<()> {
    let env = run.cfg.env.world()?;
    let e = &run.cfg.env;
    let ds = generate_dataset(&env, &e.policy, e.n_traj, e.traj_len, run.cfg.seed)?;
    let mut w = run.create(DATASET)?;
    write_dataset(&mut w, &ds)?;
    w.flush()?;
    drop(w);
    let steps: usize = ds.iter().map(|t| t.actions.len()).sum();
    eprintln!("{} trajectories, {steps} transitions", ds.len());
    run.finish()
}

/// Held-out trajectories for evaluation, on a seed disjoint from the training draw.
fn held_out(run: &Run, env: &GridWorld) -> Result<Vec<Trajectory>> {
    let e = &run.cfg.env;
    let n = (e.n_traj / 5).max(1);
    Ok(generate_dataset(
        env,
        &e.policy,
        n,
        e.traj_len,
        run.cfg.seed ^ 0x5eed_0f_7e57,
    )?)
}

#[derive(Serialize)]
struct MusikReport {
    train_accuracy: f64,
    held_out_accuracy: f64,
    k_max: usize,
    chance: f64,
}

pub fn train_musik(mut run: Run) -> Result<()> {
    let ds = run.dataset()?;
    let env = run.cfg.env.world()?;
    let cfg = run.cfg.tokenizer.inverse_dynamics.clone();
    let fit = train_inverse_dynamics(&ds, &cfg, run.cfg.seed)?;
    let path = run.record(ENCODER);
    fit.encoder.save(&path)?;
    let mut w = run.create("musik_curve.csv")?;
    write_curve_csv(&mut w, &fit.curve)?;
    w.flush()?;
    drop(w);
    let report = MusikReport {
        train_accuracy: fit.encoder.action_accuracy(&ds, cfg.k_max)?,
        held_out_accuracy: fit
            .encoder
            .action_accuracy(&held_out(&run, &env)?, cfg.k_max)?,
        k_max: cfg.k_max,
        chance: 1.0 / voc_core::env::NUM_ACTIONS as f64,
    };
    eprintln!("held-out action accuracy {:.4}", report.held_out_accuracy);
    run.write_json("musik_eval.json", &report)?;
    run.finish()
}

pub fn fit_codebook_cmd(mut run: Run) -> Result<()> {
    let ds = run.dataset()?;
    let t = run.cfg.tokenizer.clone();
    let frames: Vec<Frame> = ds.iter().flat_map(|tr| tr.frames.iter().cloned()).collect();
    let (h, w, c) = frames[0].shape();
    let fmap: Box<dyn FeatureMap> = match t.feature_map {
        FeatureKind::RawPixels => Box::new(RawPixels::new([h, w, c], t.patch_grid)?),
        FeatureKind::FrozenRandom => Box::new(FrozenRandom::new(
            [h, w, c],
            t.patch_grid,
            t.out_dim,
            run.cfg.seed,
        )?),
        FeatureKind::InverseDynamics => Box::new(
            InverseDynamicsFeatures::new(Arc::new(run.encoder()?)).with_checkpoint_name(ENCODER),
        ),
    };
    let cb = fit_codebook(&frames, fmap.as_ref(), t.k, run.cfg.seed)?;
    let path = run.record(CODEBOOK);
    cb.save(&path)?;
    let tok = run.tokenizer()?;
    let mut w = run.create("codebook_eval.csv")?;
    writeln!(w, "K,D,tokens_per_frame,quantization_mse")?;
    writeln!(
        w,
        "{},{},{},{}",
        cb.k(),
        cb.dim(),
        fmap.tokens_per_frame(),
        tok.quantization_mse(&frames)?
    )?;
    w.flush()?;
    drop(w);
    run.finish()
}

fn latent_data(run: &Run, tok: &Tokenizer, ds: &[Trajectory]) -> Result<Vec<LatentTrajectory>> {
    let episodic = run.cfg.env.grid.episodic;
    ds.iter()
        .map(|t| {
            Ok(LatentTrajectory {
                latents: tok.trajectory_latents(&t.frames)?,
                terminal: episodic && t.rewards.last() == Some(&1.0),
            })
        })
        .collect()
}

pub fn train_voc(mut run: Run) -> Result<()> {
    let ds = run.dataset()?;
    let tok = run.tokenizer()?;
    let data = latent_data(&run, &tok, &ds)?;
    let cfg = run.cfg.model.train_config(run.cfg.seed);
    let be = backend(&run.cfg.model.backend)?;
    let (model, log) = be.train(tok.layout(), &data, &cfg)?;
    let path = run.record(MODEL);
    model.save(&path)?;
    let mut w = run.create("voc_train_log.csv")?;
    write_training_log(&mut w, &log)?;
    w.flush()?;
    drop(w);
    if let Some(last) = log.last() {
        eprintln!(
            "{} backend, gamma {}: final loss {:.6}",
            be.name(),
            cfg.gamma,
            last.loss
        );
    }
    run.finish()
}

#[derive(Serialize)]
struct RewardReport {
    train_mse: f64,
    validation_mse: Option<f64>,
}

pub fn train_reward_cmd(mut run: Run) -> Result<()> {
    let ds = run.dataset()?;
    let tok = run.tokenizer()?;
    let fit = train_reward(&ds, &tok, &run.cfg.reward, run.cfg.seed)?;
    let path = run.record(REWARD);
    fit.model.save(&path)?;
    let mut w = run.create("reward_curve.csv")?;
    write_curve_csv(&mut w, &fit.curve)?;
    w.flush()?;
    drop(w);
    run.write_json(
        "reward_eval.json",
        &RewardReport {
            train_mse: fit.train_mse,
            validation_mse: fit.validation_mse,
        },
    )?;
    run.finish()
}

/// Transition matrix of the chain observed in the dataset; `None` rows were never left.
fn empirical_chain(ds: &[Trajectory], n: usize) -> Option<Vec<Option<Vec<f64>>>> {
    let mut counts = vec![vec![0.0; n]; n];
    for t in ds {
        let ids = t.state_ids.as_ref()?;
        for w in ids.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
    }
    Some(
        counts
            .into_iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                (total > 0.0).then(|| row.into_iter().map(|c| c / total).collect())
            })
            .collect(),
    )
}

fn behaviour_mdp(run: &Run, env: &GridWorld) -> Result<(MdpSpec, PolicyMatrix)> {
    let mdp = env.as_mdp();
    let pi = run.cfg.env.policy.as_matrix(env)?;
    Ok((mdp, pi))
}

#[derive(Serialize)]
struct OccupancyReport {
    gamma: f64,
    states_evaluated: usize,
    mean_tv_oracle: f64,
    max_tv_oracle: f64,
    /// Against the occupancy of the chain observed in the training data.
    mean_tv_data: Option<f64>,
    max_tv_data: Option<f64>,
}

fn mean_max(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    (mean, v.iter().copied().fold(0.0, f64::max))
}

pub fn eval_occupancy(mut run: Run) -> Result<()> {
    let model = run.model()?;
    let tok = run.tokenizer()?;
    let ds = run.dataset()?;
    let env = run.cfg.env.world()?;
    let gamma = model.gamma();
    let (mdp, pi) = behaviour_mdp(&run, &env)?;
    let oracle = exact_occupancy(&mdp, &pi, gamma)?;
    let n = env.n_states();
    // rows never left in the data stay put, so the whole chain is stochastic
    let data_occ = match empirical_chain(&ds, n) {
        Some(rows) => {
            let seen: Vec<bool> = rows.iter().map(Option::is_some).collect();
            let p: Vec<Vec<f64>> = rows
                .into_iter()
                .enumerate()
                .map(|(s, r)| {
                    r.unwrap_or_else(|| (0..n).map(|j| if j == s { 1.0 } else { 0.0 }).collect())
                })
                .collect();
            Some((exact_occupancy_from_chain(&p, gamma)?, seen))
        }
        None => None,
    };
    let support = GridSupport::new(&tok, &env)?;
    let mut w = run.create("occupancy_tv.csv")?;
    writeln!(w, "state_id,tv_oracle,tv_data,support_mass")?;
    let (mut tv_o, mut tv_d) = (Vec::new(), Vec::new());
    for s in 0..n {
        let cond = support.still(&tok, &env, s)?;
        let dist = match density_over_support(model.as_ref(), &cond, &support.latents) {
            Ok(d) => d,
            Err(VocError::UnseenConditioning(_)) => {
                writeln!(w, "{s},nan,nan,0")?;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let probs = support.to_states(&dist.probs);
        let a = tv_distance(&probs, oracle.row(s))?;
        tv_o.push(a);
        let b = match &data_occ {
            Some((occ, seen)) if seen[s] => {
                let b = tv_distance(&probs, occ.row(s))?;
                tv_d.push(b);
                format!("{b}")
            }
            _ => "nan".into(),
        };
        writeln!(w, "{s},{a},{b},{}", dist.mass)?;
    }
    w.flush()?;
    drop(w);
    if tv_o.is_empty() {
        bail!("the model conditions on none of the grid states");
    }
    let (mo, xo) = mean_max(&tv_o);
    let (md, xd) = mean_max(&tv_d);
    let report = OccupancyReport {
        gamma,
        states_evaluated: tv_o.len(),
        mean_tv_oracle: mo,
        max_tv_oracle: xo,
        mean_tv_data: (!tv_d.is_empty()).then_some(md),
        max_tv_data: (!tv_d.is_empty()).then_some(xd),
    };
    eprintln!("mean TV to oracle {mo:.4}, to data occupancy {md:.4}");
    run.write_json("occupancy_summary.json", &report)?;
    run.finish()
}

#[derive(Serialize)]
struct ValueReport {
    gamma: f64,
    n_samples: usize,
    horizon: usize,
    mean_abs_error: f64,
    max_abs_error: f64,
    spearman_sampling_density: f64,
    spearman_sampling_oracle: f64,
}

pub fn eval_value(mut run: Run) -> Result<()> {
    let model = run.model()?;
    let tok = run.tokenizer()?;
    let rm = run.reward()?.on_latents(&tok);
    let env = run.cfg.env.world()?;
    let v = run.cfg.valuation.clone();
    let gamma = model.gamma();
    let (mdp, pi) = behaviour_mdp(&run, &env)?;
    let oracle = exact_value(&mdp, &pi, gamma)?;
    let support = GridSupport::new(&tok, &env)?;
    let n = env.n_states();
    let (mut sampled, mut density, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    let mut dists: Vec<(usize, ValueEstimate)> = Vec::new();
    let mut dens_rows = Vec::new();
    for s in 0..n {
        let z = support.still(&tok, &env, s)?;
        if !model.knows(&z) {
            continue;
        }
        let mut rng = rng_for(run.cfg.seed, streams::EVAL + s as u64);
        let est = value_by_sampling(model.as_ref(), &rm, &z, v.n_samples, &mut rng)?;
        let start = env.with_state(s)?;
        let mut roll_rng = rng_for(run.cfg.seed, streams::EVAL + (n + s) as u64);
        let mut total = 0.0;
        let mut zero_terms = 0;
        for _ in 0..v.trajectories_per_state {
            let tr = rollout_from(&start, &run.cfg.env.policy, v.horizon + 1, &mut roll_rng)?;
            let lat = tok.trajectory_latents(&tr.frames)?;
            let futures = &lat[1..];
            let d = value_by_density(
                model.as_ref(),
                &rm,
                &z,
                futures,
                v.horizon.min(futures.len()),
                v.density_variant,
            )?;
            total += d.mean;
            zero_terms += d.zero_density_terms;
        }
        let d = total / v.trajectories_per_state as f64;
        ids.push(s);
        sampled.push(est.mean);
        density.push(d);
        dens_rows.push((s, d, zero_terms));
        dists.push((s, est));
    }
    if ids.is_empty() {
        bail!("the model conditions on none of the grid states");
    }
    let exact: Vec<f64> = ids.iter().map(|&s| oracle[s]).collect();
    let summary = return_estimation_error(&ids, &sampled, &exact)?;
    let mut w = run.create("value_error.csv")?;
    write_error_csv(&mut w, &summary)?;
    w.flush()?;
    drop(w);
    let mut w = run.create("value_density.csv")?;
    writeln!(w, "state_id,density_estimate,zero_density_terms")?;
    for (s, d, z) in &dens_rows {
        writeln!(w, "{s},{d:.10},{z}")?;
    }
    w.flush()?;
    drop(w);
    let refs: Vec<(usize, &ValueEstimate)> = dists.iter().map(|(s, e)| (*s, e)).collect();
    let mut w = run.create("return_distribution.csv")?;
    write_return_distribution_csv(&mut w, &refs)?;
    w.flush()?;
    drop(w);
    let report = ValueReport {
        gamma,
        n_samples: v.n_samples,
        horizon: v.horizon,
        mean_abs_error: summary.mean_abs_error,
        max_abs_error: summary.max_abs_error,
        spearman_sampling_density: spearman(&sampled, &density)?,
        spearman_sampling_oracle: spearman(&sampled, &exact)?,
    };
    eprintln!(
        "mean |V - V*| {:.4}; Spearman sampling/density {:.3}",
        report.mean_abs_error, report.spearman_sampling_density
    );
    run.write_json("value_summary.json", &report)?;
    run.finish()
}

/// Binary PGM of frames side by side, one mid-gray column between them.
pub fn write_pgm_strip<W: Write>(mut w: W, frames: &[Frame]) -> Result<()> {
    let Some(first) = frames.first() else {
        bail!("no frames to draw");
    };
    let (h, fw, _) = first.shape();
    let width = frames.len() * (fw + 1) - 1;
    write!(w, "P5\n{width} {h}\n255\n")?;
    for r in 0..h {
        let mut row = Vec::with_capacity(width);
        for (i, f) in frames.iter().enumerate() {
            if i > 0 {
                row.push(64u8);
            }
            row.extend((0..fw).map(|c| f.at(r, c, 0)));
        }
        w.write_all(&row)?;
    }
    Ok(())
}

fn decode_last(tok: &Tokenizer, z: &voc_core::tokenizer::LatentState) -> Result<Frame> {
    match tok.decode(z)? {
        Reconstruction::Frames(mut fs) => Ok(fs.pop().context("decoded latent has no frames")?),
        Reconstruction::Features(_) => {
            bail!("rollout needs a pixel-space tokenizer; set tokenizer.feature_map to raw-pixels")
        }
    }
}

pub fn rollout_cmd(mut run: Run, start_state: usize, steps: usize) -> Result<()> {
    let model = run.model()?;
    let tok = run.tokenizer()?;
    let env = run.cfg.env.world()?;
    if start_state >= env.n_states() {
        bail!(
            "start state {start_state} outside the {} grid states",
            env.n_states()
        );
    }
    let start = env.with_state(start_state)?.render();
    let z0 = tok.encode(&vec![&start; tok.stack_size()])?;
    let mut rng = rng_for(run.cfg.seed, streams::EVAL);
    let chain = rollout(model.as_ref(), &z0, steps, &mut rng)?;
    let samples = model.sample_future(&z0, steps, &mut rng)?;
    for (name, zs) in [("rollout.pgm", &chain), ("samples.pgm", &samples)] {
        let mut frames = vec![start.clone()];
        for z in zs {
            frames.push(decode_last(&tok, z)?);
        }
        let mut w = run.create(name)?;
        write_pgm_strip(&mut w, &frames)?;
        w.flush()?;
    }
    run.finish()
}

fn needs(methods: &[String], any_of: &[&str]) -> bool {
    methods.iter().any(|m| any_of.contains(&m.as_str()))
}

pub fn mpc(mut run: Run) -> Result<()> {
    let tok = run.tokenizer()?;
    let env = run.cfg.env.world()?;
    let m = run.cfg.mpc.clone();
    let mut ctx = ScorerContext {
        n_value_samples: m.n_value_samples,
        ..Default::default()
    };
    let mut gamma = run.cfg.model.gamma;
    if needs(&m.methods, &["voc", "init-model"]) {
        let model = run.model()?;
        gamma = model.gamma();
        let mut cfg = run.cfg.model.train_config(run.cfg.seed);
        cfg.gamma = gamma;
        ctx.init_model = Some(Arc::from(backend("neural")?.init(tok.layout(), &cfg)?));
        ctx.model = Some(Arc::from(model));
    }
    if needs(&m.methods, &["voc", "init-model", "no-lookahead"]) {
        ctx.reward = Some(Arc::new(run.reward()?.on_latents(&tok)) as Arc<dyn LatentReward>);
    }
    if needs(&m.methods, &["oracle"]) {
        let (mdp, pi) = behaviour_mdp(&run, &env)?;
        ctx.oracle = Some(Arc::new(OracleValue {
            values: exact_value(&mdp, &pi, gamma)?,
            rewards: mdp.reward.clone(),
            gamma,
        }));
    }
    let buffer = match m.buffer_source {
        crate::config::BufferSource::Dataset => {
            let ds = run.dataset()?;
            let actions: Vec<usize> = ds.iter().flat_map(|t| t.actions.iter().copied()).collect();
            build_candidate_buffer(
                CandidateSource::Dataset(&actions),
                m.candidate_buffer_size,
                run.cfg.seed,
            )?
        }
        crate::config::BufferSource::Uniform => build_candidate_buffer(
            CandidateSource::Uniform {
                n_actions: voc_core::env::NUM_ACTIONS,
            },
            m.candidate_buffer_size,
            run.cfg.seed,
        )?,
    };
    let mut runs: Vec<MpcRun> = Vec::new();
    for method in &m.methods {
        let scorer = build_scorer(method, &ctx)?;
        let r = run_mpc(
            &env,
            &tok,
            scorer.as_ref(),
            &buffer,
            &m.mpc_config(method),
            run.cfg.seed,
        )?;
        eprintln!(
            "{method}: mean return {:.3}, median {:.3}",
            r.summary.mean, r.summary.median
        );
        runs.push(r);
    }
    let refs: Vec<&MpcRun> = runs.iter().collect();
    let mut w = run.create("mpc_results.csv")?;
    write_results_csv(&mut w, &refs)?;
    w.flush()?;
    drop(w);
    let mut w = run.create("mpc_summary.csv")?;
    write_summary_csv(&mut w, &refs)?;
    w.flush()?;
    drop(w);
    run.finish()
}

pub fn oracle(mut run: Run, mdp_name: &str, gamma: f64) -> Result<()> {
    let (mdp, pi) = match mdp_name {
        "cycle3" => (
            MdpSpec::cycle(3, vec![0.0, 1.0, 0.0])?,
            PolicyMatrix::uniform(3, 1),
        ),
        "env" => {
            let env = run.cfg.env.world()?;
            behaviour_mdp(&run, &env)?
        }
        other => bail!("unknown MDP `{other}` (available: cycle3, env)"),
    };
    let occ = exact_occupancy(&mdp, &pi, gamma)?;
    let mut w = run.create("oracle_occupancy.csv")?;
    write_matrix_csv(&mut w, &occ.mu, "s")?;
    w.flush()?;
    drop(w);
    let values = exact_value(&mdp, &pi, gamma)?;
    let mut w = run.create("oracle_value.csv")?;
    writeln!(w, "state,value")?;
    for (s, v) in values.iter().enumerate() {
        writeln!(w, "{s},{v:.6}")?;
    }
    w.flush()?;
    drop(w);
    run.finish()
}
