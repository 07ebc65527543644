//! Acceptance gate: the ten pipeline-level criteria, each printed as a
//! single [PASS]/[FAIL] line with its pinned tolerance. Most criteria run
//! against the artifacts of one full desk-scale manifest execution; the
//! determinism check reruns a reduced five-stage manifest twice. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use trucklab::cacc::{rollout, CaccConfig, CaccEnv, EgoBackend, Trajectory};
use trucklab::cyclegen::{
    accel_mean, accel_std, generate_spanning_episode, integrate_raw_speed, sample_acceleration,
    CycleGenConfig, SpeedTracker,
};
use trucklab::model::{forward_deployment, DeepModelParams, IoSpec};
use trucklab::pipeline::{read_episode_dir, run_experiment};
use trucklab::plant::PlantConfig;
use trucklab::policy::{act_mean, sample_action, PolicyParams};
use trucklab::trainer::{backprop_kstep, loss_kstep, train, Slice, TrainConfig};
use trucklab::util::stream_rng;

struct Outcome {
    name: &'static str,
    result: Result<String, String>,
}

fn record(outcomes: &mut Vec<Outcome>, name: &'static str, result: Result<String, String>) {
    match &result {
        Ok(detail) => println!("[PASS] {name} — {detail}"),
        Err(detail) => println!("[FAIL] {name} — {detail}"),
    }
    outcomes.push(Outcome { name, result });
}

fn manifest_copy(dir: &Path, run_name: &str) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests/desk.cfg");
    let text = std::fs::read_to_string(&src).expect("read manifests/desk.cfg");
    let out_line = format!("out = {}", dir.join(run_name).display());
    let rewritten: String = text
        .lines()
        .map(|l| {
            if l.trim_start().starts_with("out =") {
                out_line.clone()
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.join(format!("{run_name}.cfg"));
    std::fs::write(&path, rewritten).unwrap();
    path
}

/// Criterion 1 — constraint exactness on 100 deployment-form rollouts:
/// max |v̂(k+1) − v̂(k) − â(k+1)·dt| < 1e-9 relative to max(1, |v̂|).
fn criterion_1(model: &DeepModelParams, val: &[trucklab::episode::Episode]) -> Result<String, String> {
    let horizon = 400;
    let dt = model.io.dt;
    let mut max_rel = 0.0f64;
    for m in 0..100u64 {
        let mut rng = stream_rng(7001, m);
        let ep = &val[rng.gen_range(0..val.len())];
        let k0 = rng.gen_range(0..ep.len() - horizon - 1);
        let u: Vec<[f64; 2]> = (0..horizon).map(|j| ep.u_at(k0 + j)).collect();
        let preds = forward_deployment(model, &u, &[], ep.y_at(k0), horizon)
            .map_err(|e| format!("rollout failed: {e}"))?;
        for k in 1..=horizon {
            let resid = (preds[k][1] - preds[k - 1][1] - preds[k][0] * dt).abs();
            max_rel = max_rel.max(resid / preds[k][1].abs().max(1.0));
        }
    }
    if max_rel < 1e-9 {
        Ok(format!("max relative residual {max_rel:.2e} < 1e-9 over 100 rollouts"))
    } else {
        Err(format!("max relative residual {max_rel:.2e} >= 1e-9"))
    }
}

/// Criterion 2 — BPTT vs central finite differences on an h = 4, K = 8
/// model: every parameter within 1e-4 relative (guarded by 1e-10 absolute
/// for near-zero entries).
fn criterion_2() -> Result<String, String> {
    let gen = CycleGenConfig {
        flat: true,
        ..CycleGenConfig::default()
    };
    let plant = PlantConfig::default();
    let tracker = SpeedTracker::default();
    let ep = generate_spanning_episode(&gen, &mut stream_rng(7002, 0), &plant, &tracker, 60.0)
        .map_err(|e| format!("episode generation failed: {e}"))?;
    let episodes = vec![ep];
    let io = IoSpec::from_episodes(&episodes, 0.1).map_err(|e| e.to_string())?;
    let mut params = DeepModelParams::init(io, 4, &[4], &mut stream_rng(7002, 1))
        .map_err(|e| e.to_string())?;
    let batch = [Slice { episode: 0, k0: 3 }, Slice { episode: 0, k0: 41 }];
    let k_steps = 8;

    let (_, grad) = backprop_kstep(&params, &episodes, &batch, k_steps).map_err(|e| e.to_string())?;
    let analytic = grad.flat();
    let base = params.flat();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        params.set_flat(&plus);
        let lp = loss_kstep(&params, &episodes, &batch, k_steps).map_err(|e| e.to_string())?;
        let mut minus = base.clone();
        minus[i] -= h;
        params.set_flat(&minus);
        let lm = loss_kstep(&params, &episodes, &batch, k_steps).map_err(|e| e.to_string())?;
        let fd = (lp - lm) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs());
        if denom > 1e-10 {
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
    }
    params.set_flat(&base);
    if worst < 1e-4 {
        Ok(format!(
            "worst relative error {worst:.2e} < 1e-4 over {} parameters",
            base.len()
        ))
    } else {
        Err(format!("worst relative error {worst:.2e} >= 1e-4"))
    }
}

/// Criterion 3 — replica fidelity on 90 fresh 40 s open-loop trials over
/// held-out data: |mean v error| < 0.5 m/s and |mean a error| < 0.5 m/s²
/// at every step; per-trial max |v error| < 1.5 m/s in >= 80% of trials.
fn criterion_3(model: &DeepModelParams, val: &[trucklab::episode::Episode]) -> Result<String, String> {
    let horizon = 400;
    let trials = 90;
    let mut per_trial_ok = 0;
    let mut v_err_sums = vec![0.0f64; horizon + 1];
    let mut a_err_sums = vec![0.0f64; horizon + 1];
    for m in 0..trials as u64 {
        let mut rng = stream_rng(7003, m);
        let ep = &val[rng.gen_range(0..val.len())];
        let k0 = rng.gen_range(0..ep.len() - horizon - 1);
        let u: Vec<[f64; 2]> = (0..horizon).map(|j| ep.u_at(k0 + j)).collect();
        let preds = forward_deployment(model, &u, &[], ep.y_at(k0), horizon)
            .map_err(|e| format!("rollout failed: {e}"))?;
        let mut max_v_err = 0.0f64;
        for k in 0..=horizon {
            let truth = ep.y_at(k0 + k);
            let v_err = preds[k][1] - truth[1];
            let a_err = preds[k][0] - truth[0];
            v_err_sums[k] += v_err;
            a_err_sums[k] += a_err;
            max_v_err = max_v_err.max(v_err.abs());
        }
        if max_v_err < 1.5 {
            per_trial_ok += 1;
        }
    }
    let worst_mean_v = v_err_sums.iter().map(|s| (s / trials as f64).abs()).fold(0.0, f64::max);
    let worst_mean_a = a_err_sums.iter().map(|s| (s / trials as f64).abs()).fold(0.0, f64::max);
    let frac_ok = per_trial_ok as f64 / trials as f64;
    if worst_mean_v < 0.5 && worst_mean_a < 0.5 && frac_ok >= 0.8 {
        Ok(format!(
            "worst |mean v err| {worst_mean_v:.3} < 0.5, worst |mean a err| {worst_mean_a:.3} < 0.5, \
             per-trial max < 1.5 in {per_trial_ok}/{trials} (>= 80%)"
        ))
    } else {
        Err(format!(
            "worst |mean v err| {worst_mean_v:.3} (limit 0.5), worst |mean a err| {worst_mean_a:.3} \
             (limit 0.5), per-trial ok {per_trial_ok}/{trials} (need >= 72)"
        ))
    }
}

/// Criterion 4 — learning-curve convergence on 3 seeds at a reduced desk
/// scale (hidden 32, 150 epochs, 2×600 s of data): final deployment-form
/// loss < 20% of its epoch-0 value, every logged loss finite.
fn criterion_4() -> Result<String, String> {
    let gen = CycleGenConfig {
        flat: true,
        ..CycleGenConfig::default()
    };
    let plant = PlantConfig::default();
    let tracker = SpeedTracker::default();
    let episodes: Vec<_> = (0..2u64)
        .map(|i| generate_spanning_episode(&gen, &mut stream_rng(7004, i), &plant, &tracker, 600.0))
        .collect::<Result<_, _>>()
        .map_err(|e| format!("episode generation failed: {e}"))?;
    let cfg = TrainConfig {
        hidden: 32,
        decoder_hidden: vec![32, 32],
        epochs: 150,
        ..TrainConfig::default()
    };
    let mut ratios = Vec::new();
    for seed in [101u64, 102, 103] {
        let io = IoSpec::from_episodes(&episodes, episodes[0].dt).map_err(|e| e.to_string())?;
        let mut rng = stream_rng(seed, 0);
        let params = DeepModelParams::init(io, cfg.hidden, &cfg.decoder_hidden, &mut rng)
            .map_err(|e| e.to_string())?;
        let result = train(params, &episodes, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let first = result.curve.first().unwrap().deploy_form_loss;
        let last = result.curve.last().unwrap().deploy_form_loss;
        if result
            .curve
            .iter()
            .any(|r| !r.train_form_loss.is_finite() || !r.deploy_form_loss.is_finite())
        {
            return Err(format!("seed {seed}: non-finite loss in curve"));
        }
        ratios.push(last / first);
    }
    if ratios.iter().all(|&r| r < 0.2) {
        Ok(format!(
            "final/epoch-0 deployment loss ratios {:?} all < 0.2 on 3 seeds",
            ratios.iter().map(|r| format!("{:.1}%", 100.0 * r)).collect::<Vec<_>>()
        ))
    } else {
        Err(format!("ratios {ratios:?} not all < 0.2"))
    }
}

/// Criterion 5 — cycle-generator coverage: 1 h of generated spanning
/// speed profiles hits all 10 speed deciles of [0, 35] m/s with both
/// acceleration signs in every decile; raw integrated speeds stay inside
/// [v_min, v_max] exactly.
fn criterion_5() -> Result<String, String> {
    let gen = CycleGenConfig::default();
    let mut pos = [false; 10];
    let mut neg = [false; 10];
    let mut raw_in_bounds = true;
    for i in 0..6u64 {
        let profile = integrate_raw_speed(&gen, &mut stream_rng(7005, i), 600.0)
            .map_err(|e| e.to_string())?;
        raw_in_bounds &= profile
            .v_raw
            .iter()
            .all(|&v| (gen.v_min..=gen.v_max).contains(&v));
        for k in 0..profile.v_raw.len() {
            let d = ((profile.v_raw[k] - gen.v_min) / (gen.v_max - gen.v_min) * 10.0)
                .floor()
                .clamp(0.0, 9.0) as usize;
            if profile.a_raw[k] > 0.0 {
                pos[d] = true;
            } else if profile.a_raw[k] < 0.0 {
                neg[d] = true;
            }
        }
    }
    let all_covered = (0..10).all(|d| pos[d] && neg[d]);
    if all_covered && raw_in_bounds {
        Ok("all 10 deciles of [0, 35] m/s visited with both accel signs; raw speeds within \
            [v_min, v_max] exactly"
            .into())
    } else {
        Err(format!("pos {pos:?}, neg {neg:?}, raw in bounds {raw_in_bounds}"))
    }
}

/// Criterion 6 — CACC environment correctness: env ego-velocity equals
/// forward_deployment on the logged actions (max abs diff < 1e-12); crash
/// fires exactly at gap <= d_safety; perfect tracking with zero action
/// gives reward exactly 0.
fn criterion_6(model: &DeepModelParams) -> Result<String, String> {
    let cfg = CaccConfig::default();
    let mut rng = stream_rng(7006, 0);
    let mut env = CaccEnv::reset(&cfg, EgoBackend::Deep(model), &mut rng);
    let v0 = env.state.v_ego;
    let steps = 200;
    let mut actions: Vec<[f64; 2]> = Vec::with_capacity(steps);
    let mut v_env = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = [rng.gen_range(0.0..40.0), rng.gen_range(0.0..5.0)];
        actions.push(a);
        env.step(a).map_err(|e| e.to_string())?;
        v_env.push(env.state.v_ego);
    }
    let preds = forward_deployment(model, &actions, &[], [0.0, v0, cfg.idle_fuel_rate], steps)
        .map_err(|e| e.to_string())?;
    let max_diff = v_env
        .iter()
        .enumerate()
        .map(|(k, v)| (v - preds[k + 1][1]).abs())
        .fold(0.0, f64::max);

    // Crash boundary, inclusive at gap == d_safety.
    let mut env2 = CaccEnv::reset(&cfg, EgoBackend::Deep(model), &mut stream_rng(7006, 1));
    env2.state.p_ego = env2.state.p_leader - cfg.d_safety;
    let (r_at, crash_at) = env2.reward(0.0, 0.0);
    env2.state.p_ego = env2.state.p_leader - cfg.d_safety - 1e-9;
    let (_, crash_above) = env2.reward(0.0, 0.0);

    // Perfect tracking, zero action: reward exactly zero.
    let mut env3 = CaccEnv::reset(&cfg, EgoBackend::Deep(model), &mut stream_rng(7006, 2));
    env3.state.v_ego = env3.state.v_leader;
    env3.state.p_ego = env3.state.p_leader - env3.state.desired_gap();
    let (r_perfect, _) = env3.reward(0.0, 0.0);

    if max_diff < 1e-12 && crash_at && !crash_above && r_at <= -cfg.alpha_crash && r_perfect == 0.0 {
        Ok(format!(
            "max |v_env − v_model| {max_diff:.2e} < 1e-12; crash boundary inclusive; \
             perfect-tracking reward exactly 0"
        ))
    } else {
        Err(format!(
            "max diff {max_diff:.2e}, crash at boundary {crash_at}, crash above {crash_above}, \
             perfect reward {r_perfect}"
        ))
    }
}

fn deterministic_rollouts(
    policy: &PolicyParams,
    cacc: &CaccConfig,
    backend: EgoBackend,
    trials: u64,
    seed: u64,
) -> Result<Vec<Trajectory>, String> {
    (0..trials)
        .map(|m| {
            let mut rng = stream_rng(seed, m);
            let mut env = CaccEnv::reset(cacc, backend, &mut rng);
            rollout(&mut env, |obs| act_mean(obs, policy).expect("policy forward"), cacc.horizon)
                .map_err(|e| e.to_string())
        })
        .collect()
}

/// Criterion 7 — policy quality in the deep environment: over 100
/// deterministic rollouts, |time-gap error| < 0.2 s after 15 s and
/// |speed error| < 0.1 m/s after 30 s in >= 90 rollouts, zero crashes.
fn criterion_7(policy: &PolicyParams, model: &DeepModelParams) -> Result<String, String> {
    let cfg = CaccConfig::default();
    let trajectories = deterministic_rollouts(policy, &cfg, EgoBackend::Deep(model), 100, 9090)?;
    let crashes = trajectories.iter().filter(|t| t.crashed).count();
    let mut ok = 0;
    for tr in &trajectories {
        let mut good = tr.steps.len() == cfg.horizon;
        for (t, s) in tr.steps.iter().enumerate() {
            let v_e = s.obs[1];
            let tg_err = if v_e > 0.0 { s.gap_error / v_e } else { f64::INFINITY };
            if (t >= 150 && tg_err.abs() >= 0.2) || (t >= 300 && s.speed_error.abs() >= 0.1) {
                good = false;
                break;
            }
        }
        if good {
            ok += 1;
        }
    }
    if ok >= 90 && crashes == 0 {
        Ok(format!(
            "{ok}/100 rollouts within |tg err| < 0.2 s after 15 s and |v err| < 0.1 m/s after 30 s; \
             {crashes} crashes"
        ))
    } else {
        Err(format!("{ok}/100 rollouts ok (need >= 90), {crashes} crashes (need 0)"))
    }
}

/// Criterion 8 — zero-shot transfer to the surrogate plant: 10 rollouts,
/// zero crashes, |steady-state (t >= 60 s) mean time-gap error| < 0.3 s.
fn criterion_8(policy: &PolicyParams) -> Result<String, String> {
    let cfg = CaccConfig::default();
    let plant = PlantConfig::default();
    let trajectories = deterministic_rollouts(policy, &cfg, EgoBackend::Plant(&plant), 10, 9091)?;
    let crashes = trajectories.iter().filter(|t| t.crashed).count();
    let mut sum = 0.0;
    let mut n = 0usize;
    for tr in &trajectories {
        for (t, s) in tr.steps.iter().enumerate() {
            if t >= 600 && s.obs[1] > 0.0 {
                sum += s.gap_error / s.obs[1];
                n += 1;
            }
        }
    }
    let mean_tg = sum / n.max(1) as f64;
    if crashes == 0 && mean_tg.abs() < 0.3 {
        Ok(format!(
            "0 crashes in 10 plant rollouts; |steady-state mean tg err| {:.4} s < 0.3 s",
            mean_tg.abs()
        ))
    } else {
        Err(format!("{crashes} crashes, steady-state mean tg err {mean_tg:.4} s (limit 0.3)"))
    }
}

/// Criterion 9 — determinism: two executions of the same manifest (a
/// reduced five-stage profile; determinism is scale-independent) produce
/// byte-identical per-stage artifact checksums.
fn criterion_9(tmp: &Path) -> Result<String, String> {
    let body = "[pipeline]\nout = run\nseed = 11\n\n\
                [gen-data]\nepisodes = 3\nval_episodes = 2\nduration = 90\n\n\
                [cyclegen]\nflat = true\n\n\
                [train]\nK = 16\nM = 4\nN = 2\nepochs = 12\nhidden = 8\ndecoder_hidden = 8\n\
                deploy_eval_steps = 50\ndeploy_eval_trials = 2\n\n\
                [validate]\nhorizon = 50\ntrials = 8\n\n\
                [policy]\nbatch_size = 200\niterations = 3\nhorizon = 100\n\n\
                [cacc]\nhorizon = 100\n\n\
                [eval]\ntrials = 4\nkeep_trajectories = 2\n";
    let mut outs = Vec::new();
    for name in ["det_a", "det_b"] {
        let dir = tmp.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let manifest = dir.join("manifest.cfg");
        std::fs::write(&manifest, body).map_err(|e| e.to_string())?;
        outs.push(run_experiment(&manifest).map_err(|e| format!("{name}: {e}"))?);
    }
    let stages = ["gen-data", "train-model", "validate-model", "train-policy", "eval-policy"];
    for stage in stages {
        let a = std::fs::read_to_string(outs[0].join(stage).join("checksums.txt"))
            .map_err(|e| format!("{stage}: {e}"))?;
        let b = std::fs::read_to_string(outs[1].join(stage).join("checksums.txt"))
            .map_err(|e| format!("{stage}: {e}"))?;
        if a != b {
            return Err(format!("stage {stage}: checksums differ between reruns"));
        }
    }
    Ok("all 5 stage checksum files byte-identical across two executions".into())
}

/// Criterion 10 — Monte-Carlo statistical oracles at fixed seeds:
/// Gaussian sampler moments within 1%, acceleration-law moments within
/// 2%, random-walk variance within 10% of n·σ².
fn criterion_10() -> Result<String, String> {
    // Gaussian action sampler.
    let (mu, sigma) = ([3.0, -2.0], [5.0, 0.5]);
    let n = 100_000;
    let mut rng = stream_rng(7010, 0);
    let mut sums = [0.0f64; 2];
    let mut sqs = [0.0f64; 2];
    for _ in 0..n {
        let a = sample_action(mu, sigma, &mut rng);
        for c in 0..2 {
            sums[c] += a[c];
            sqs[c] += a[c] * a[c];
        }
    }
    for c in 0..2 {
        let m = sums[c] / n as f64;
        let s = (sqs[c] / n as f64 - m * m).sqrt();
        if (m - mu[c]).abs() > 0.01 * sigma[c] || (s - sigma[c]).abs() / sigma[c] > 0.01 {
            return Err(format!("sampler channel {c}: mean {m:.4}, std {s:.4} vs ({}, {})", mu[c], sigma[c]));
        }
    }

    // Acceleration law moments at a fixed speed.
    let gen = CycleGenConfig::default();
    let v = 10.0;
    let want_mu = gen.mu_a_scaling * accel_mean(v, &gen);
    let want_sigma = gen.sigma_a_scaling * accel_std(v, &gen);
    let mut rng = stream_rng(7010, 1);
    let draws: Vec<f64> = (0..n).map(|_| sample_acceleration(v, &gen, &mut rng)).collect();
    let m = draws.iter().sum::<f64>() / n as f64;
    let s = (draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64).sqrt();
    if (m - want_mu).abs() > 0.02 * want_sigma || (s - want_sigma).abs() / want_sigma > 0.02 {
        return Err(format!(
            "accel law: mean {m:.4} vs {want_mu:.4}, std {s:.4} vs {want_sigma:.4}"
        ));
    }

    // Random-walk variance: n-step walk variance is n·σ².
    let step_std = gen.road_walk_step_std;
    let walk_len = 200;
    let replicates = 1000;
    let normal = Normal::new(0.0, step_std).unwrap();
    let mut rng = stream_rng(7010, 2);
    let finals: Vec<f64> = (0..replicates)
        .map(|_| (0..walk_len).map(|_| normal.sample(&mut rng)).sum::<f64>())
        .collect();
    let wm = finals.iter().sum::<f64>() / replicates as f64;
    let var = finals.iter().map(|x| (x - wm) * (x - wm)).sum::<f64>() / (replicates - 1) as f64;
    let expected = walk_len as f64 * step_std * step_std;
    if (var - expected).abs() / expected > 0.10 {
        return Err(format!("walk variance {var:.3e} vs {expected:.3e} (10% tolerance)"));
    }

    Ok("Gaussian sampler within 1%, acceleration-law moments within 2%, walk variance within 10%"
        .into())
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();

    let manifest_a = manifest_copy(tmp.path(), "run_a");
    let run_a = run_experiment(&manifest_a).expect("desk manifest run A");
    let model = DeepModelParams::load(&run_a.join("train-model/model.ckpt")).expect("model ckpt");
    let policy = PolicyParams::load(&run_a.join("train-policy/policy.ckpt")).expect("policy ckpt");
    let val = read_episode_dir(&run_a.join("gen-data/val")).expect("val episodes");

    record(&mut outcomes, "criterion 1: kinematic constraint exactness", criterion_1(&model, &val));
    record(&mut outcomes, "criterion 2: BPTT gradient vs finite differences", criterion_2());
    record(&mut outcomes, "criterion 3: replica fidelity on held-out data", criterion_3(&model, &val));
    record(&mut outcomes, "criterion 4: learning-curve convergence (3 seeds)", criterion_4());
    record(&mut outcomes, "criterion 5: cycle-generator coverage", criterion_5());
    record(&mut outcomes, "criterion 6: CACC environment correctness", criterion_6(&model));
    record(&mut outcomes, "criterion 7: policy quality (deep environment)", criterion_7(&policy, &model));
    record(&mut outcomes, "criterion 8: zero-shot transfer to the plant", criterion_8(&policy));

    record(&mut outcomes, "criterion 9: manifest determinism", criterion_9(tmp.path()));
    record(&mut outcomes, "criterion 10: Monte-Carlo statistical oracles", criterion_10());

    let failures: Vec<&Outcome> = outcomes.iter().filter(|o| o.result.is_err()).collect();
    assert!(
        failures.is_empty(),
        "{} acceptance criteria failed: {:?}",
        failures.len(),
        failures.iter().map(|o| o.name).collect::<Vec<_>>()
    );
}
