//! Gaussian-MLP policy and REINFORCE policy-gradient trainer: 3 tanh
//! hidden layers of 25 feeding a linear 2-output mean head, with
//! state-independent log standard deviations. Updates use discounted
//! reward-to-go with a time-dependent average-return baseline and the
//! shared Adagrad optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cacc::{rollout, CaccConfig, CaccEnv, EgoBackend, Trajectory};
use crate::checkpoint::Checkpoint;
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{Activation, DenseLayer};
use crate::trainer::{adagrad_update, AdagradState};
use crate::util::{map_indexed, map_ordered};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub layers: Vec<DenseLayer>,
    pub log_std: [f64; 2],
    /// Fixed per-channel observation normalization (offset, scale).
    pub obs_offset: Vec<f64>,
    pub obs_scale: Vec<f64>,
}

/// Fixed observation normalization derived from the environment's init
/// ranges (not running statistics), for reproducibility.
pub fn obs_normalization(cfg: &CaccConfig) -> (Vec<f64>, Vec<f64>) {
    let v_mid = 0.5 * (cfg.v_leader_min + cfg.v_leader_max);
    let v_half = 0.5 * (cfg.v_leader_max - cfg.v_leader_min) + cfg.speed_error_range;
    let gap_lo = (cfg.v_leader_min - cfg.speed_error_range).max(0.0) * cfg.tg_min;
    let gap_hi = (cfg.v_leader_max + cfg.speed_error_range) * cfg.tg_max;
    let gap_mid = 0.5 * (gap_lo + gap_hi);
    let gap_half = 0.5 * (gap_hi - gap_lo) + cfg.position_error_range;
    let mut offset = vec![v_mid, v_mid, gap_mid, gap_mid];
    let mut scale = vec![v_half, v_half, gap_half, gap_half];
    if !cfg.flat {
        offset.push(0.0);
        scale.push(if cfg.grade_range > 0.0 { cfg.grade_range } else { 1.0 });
    }
    (offset, scale)
}

impl PolicyParams {
    pub fn init<R: Rng>(
        obs_dim: usize,
        hidden: &[usize],
        log_std_init: f64,
        obs_offset: Vec<f64>,
        obs_scale: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if obs_offset.len() != obs_dim || obs_scale.len() != obs_dim {
            return Err(Error::ShapeMismatch(format!(
                "obs normalization length {} vs obs_dim {obs_dim}",
                obs_offset.len()
            )));
        }
        if obs_scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("obs scales must be > 0".into()));
        }
        let mut layers = Vec::new();
        let mut d_in = obs_dim;
        for &h in hidden {
            layers.push(DenseLayer {
                w: Mat::init_uniform(h, d_in, rng),
                b: vec![0.0; h],
                activation: Activation::Tanh,
            });
            d_in = h;
        }
        layers.push(DenseLayer {
            w: Mat::init_uniform(2, d_in, rng),
            b: vec![0.0; 2],
            activation: Activation::Linear,
        });
        Ok(PolicyParams {
            layers,
            log_std: [log_std_init.clamp(LOG_STD_MIN, LOG_STD_MAX); 2],
            obs_offset,
            obs_scale,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_offset.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>() + 2
    }

    /// Canonical order: per-layer (w, b), then log_std.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b);
        }
        out.extend_from_slice(&self.log_std);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.w.data.len();
            l.w.data.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        self.log_std[0] = flat[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
        self.log_std[1] = flat[i + 1].clamp(LOG_STD_MIN, LOG_STD_MAX);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("policy");
        for (i, l) in self.layers.iter().enumerate() {
            ck.push(&format!("layer{i}.w"), vec![l.w.rows, l.w.cols], l.w.data.clone());
            ck.push(&format!("layer{i}.b"), vec![l.b.len()], l.b.clone());
        }
        ck.push("log_std", vec![2], self.log_std.to_vec());
        ck.push("obs_offset", vec![self.obs_offset.len()], self.obs_offset.clone());
        ck.push("obs_scale", vec![self.obs_scale.len()], self.obs_scale.clone());
        ck.set_extra("layer_count", &self.layers.len());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "policy" {
            return Err(Error::Checkpoint(format!(
                "expected kind 'policy', found '{}'",
                ck.kind
            )));
        }
        let n_layers: usize = ck.extra_json("layer_count")?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (wm, wd) = ck.get(&format!("layer{i}.w"))?;
            let (_, bd) = ck.get(&format!("layer{i}.b"))?;
            layers.push(DenseLayer {
                w: Mat {
                    rows: wm.shape[0],
                    cols: wm.shape[1],
                    data: wd.clone(),
                },
                b: bd.clone(),
                activation: if i + 1 == n_layers {
                    Activation::Linear
                } else {
                    Activation::Tanh
                },
            });
        }
        let (_, ls) = ck.get("log_std")?;
        let (_, off) = ck.get("obs_offset")?;
        let (_, sc) = ck.get("obs_scale")?;
        Ok(PolicyParams {
            layers,
            log_std: [ls[0], ls[1]],
            obs_offset: off.clone(),
            obs_scale: sc.clone(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

struct ForwardTrace {
    /// Input to each layer (normalized obs first).
    inputs: Vec<Vec<f64>>,
    /// Output of each layer, post-activation.
    outputs: Vec<Vec<f64>>,
}

fn forward_traced(obs: &[f64], params: &PolicyParams) -> Result<([f64; 2], ForwardTrace)> {
    if obs.len() != params.obs_dim() {
        return Err(Error::ShapeMismatch(format!(
            "observation dim {} vs policy obs_dim {}",
            obs.len(),
            params.obs_dim()
        )));
    }
    let mut cur: Vec<f64> = obs
        .iter()
        .zip(params.obs_offset.iter().zip(&params.obs_scale))
        .map(|(&o, (&off, &sc))| (o - off) / sc)
        .collect();
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut outputs = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        inputs.push(cur.clone());
        let mut out = l.b.clone();
        l.w.matvec_acc(&cur, &mut out);
        if l.activation == Activation::Tanh {
            for v in out.iter_mut() {
                *v = v.tanh();
            }
        }
        outputs.push(out.clone());
        cur = out;
    }
    Ok(([cur[0], cur[1]], ForwardTrace { inputs, outputs }))
}

/// Mean and standard deviation of the action distribution at `obs`.
pub fn policy_forward(obs: &[f64], params: &PolicyParams) -> Result<([f64; 2], [f64; 2])> {
    let (mean, _) = forward_traced(obs, params)?;
    Ok((mean, [params.log_std[0].exp(), params.log_std[1].exp()]))
}

/// Deterministic-evaluation action: the distribution mean.
pub fn act_mean(obs: &[f64], params: &PolicyParams) -> Result<[f64; 2]> {
    Ok(policy_forward(obs, params)?.0)
}

pub fn sample_action(mean: [f64; 2], std: [f64; 2], rng: &mut ChaCha8Rng) -> [f64; 2] {
    let z0: f64 = StandardNormal.sample(rng);
    let z1: f64 = StandardNormal.sample(rng);
    [mean[0] + std[0] * z0, mean[1] + std[1] * z1]
}

/// Diagonal-Gaussian log-density of the (unclamped) action.
pub fn log_prob(action: [f64; 2], mean: [f64; 2], std: [f64; 2]) -> f64 {
    let mut lp = 0.0;
    for i in 0..2 {
        let z = (action[i] - mean[i]) / std[i];
        lp += -0.5 * LN_2PI - std[i].ln() - 0.5 * z * z;
    }
    lp
}

/// Gradient with the same tensor layout as the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    pub layers: Vec<(Mat, Vec<f64>)>,
    pub log_std: [f64; 2],
}

impl PolicyGrad {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        PolicyGrad {
            layers: params
                .layers
                .iter()
                .map(|l| (Mat::zeros(l.w.rows, l.w.cols), vec![0.0; l.b.len()]))
                .collect(),
            log_std: [0.0; 2],
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyGrad, scale: f64) {
        for ((wa, ba), (wb, bb)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in wa.data.iter_mut().zip(&wb.data) {
                *a += scale * b;
            }
            for (a, b) in ba.iter_mut().zip(bb) {
                *a += scale * b;
            }
        }
        self.log_std[0] += scale * other.log_std[0];
        self.log_std[1] += scale * other.log_std[1];
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            for v in &mut w.data {
                *v *= s;
            }
            for v in b {
                *v *= s;
            }
        }
        self.log_std[0] *= s;
        self.log_std[1] *= s;
    }

    /// Same canonical order as `PolicyParams::flat`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.log_std);
        out
    }
}

/// Log-density of `action` at `obs` and its exact gradient with respect to
/// every policy parameter, via reverse accumulation through the MLP.
pub fn grad_log_prob(
    params: &PolicyParams,
    obs: &[f64],
    action: [f64; 2],
) -> Result<(f64, PolicyGrad)> {
    let (mean, trace) = forward_traced(obs, params)?;
    let std = [params.log_std[0].exp(), params.log_std[1].exp()];
    let lp = log_prob(action, mean, std);

    let mut grad = PolicyGrad::zeros_like(params);
    let mut d_mean = [0.0; 2];
    for i in 0..2 {
        let z = (action[i] - mean[i]) / std[i];
        d_mean[i] = z / std[i];
        grad.log_std[i] = z * z - 1.0;
    }

    let mut delta = d_mean.to_vec();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        if layer.activation == Activation::Tanh {
            for (d, &o) in delta.iter_mut().zip(&trace.outputs[l]) {
                *d *= 1.0 - o * o;
            }
        }
        grad.layers[l].0.add_outer(&delta, &trace.inputs[l]);
        for (g, d) in grad.layers[l].1.iter_mut().zip(&delta) {
            *g += d;
        }
        if l > 0 {
            delta = layer.w.matvec_t(&delta);
        }
    }
    Ok((lp, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgConfig {
    /// Timesteps collected per iteration.
    pub batch_size: usize,
    pub iterations: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub gradient_clip_norm: Option<f64>,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    /// Initial head bias, i.e. the mean action of the freshly initialized
    /// policy. Defaults to the ego truck's approximate steady-cruise
    /// throttle so early exploration starts near the operating point
    /// instead of full coast.
    pub action_bias_init: [f64; 2],
    /// Behavior-clone the fresh policy onto a simple gap-and-speed
    /// feedback law before policy-gradient refinement. Without it the
    /// desk-scale batch budget is far too small to discover closed-loop
    /// regulation from scratch and training collapses into the
    /// crash-early local optimum.
    pub warm_start: bool,
}

impl Default for PgConfig {
    fn default() -> Self {
        PgConfig {
            batch_size: 20_000,
            iterations: 500,
            gamma: 0.9999,
            learning_rate: 0.05,
            adagrad_epsilon: 1e-8,
            gradient_clip_norm: Some(10.0),
            horizon: 800,
            hidden: vec![25, 25, 25],
            log_std_init: 5.0f64.ln(),
            action_bias_init: [6.0, 0.0],
            warm_start: true,
        }
    }
}

impl PgConfig {
    /// Smaller profile sized for minutes-scale single-machine runs. The
    /// tighter initial exploration and gentler step size keep the
    /// refinement stage from wandering off the warm start within the
    /// reduced batch budget.
    pub fn desk_scale() -> Self {
        PgConfig {
            batch_size: 4_000,
            iterations: 200,
            log_std_init: 0.0,
            learning_rate: 0.01,
            ..PgConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < self.horizon {
            return Err(Error::InvalidConfig("batch_size must be >= horizon".into()));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig("gamma must be in (0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = if kv
            .section("policy")
            .map(|s| s.str_or("profile", "desk") == "paper")
            .unwrap_or(false)
        {
            PgConfig::default()
        } else {
            PgConfig::desk_scale()
        };
        let Some(s) = kv.section("policy") else {
            return Ok(d);
        };
        let cfg = PgConfig {
            batch_size: s.usize_or("batch_size", d.batch_size)?,
            iterations: s.usize_or("iterations", d.iterations)?,
            gamma: s.f64_or("gamma", d.gamma)?,
            learning_rate: s.f64_or("learning_rate", d.learning_rate)?,
            adagrad_epsilon: s.f64_or("adagrad_epsilon", d.adagrad_epsilon)?,
            gradient_clip_norm: match s.f64_or("gradient_clip_norm", 10.0)? {
                x if x <= 0.0 => None,
                x => Some(x),
            },
            horizon: s.usize_or("horizon", d.horizon)?,
            hidden: match s.get("hidden") {
                Some(_) => s.f64_list("hidden")?.iter().map(|&x| x as usize).collect(),
                None => d.hidden,
            },
            log_std_init: s.f64_or("log_std_init", d.log_std_init)?,
            action_bias_init: match s.get("action_bias_init") {
                Some(_) => {
                    let v = s.f64_list("action_bias_init")?;
                    if v.len() != 2 {
                        return Err(Error::InvalidConfig(
                            "action_bias_init needs exactly 2 values".into(),
                        ));
                    }
                    [v[0], v[1]]
                }
                None => d.action_bias_init,
            },
            warm_start: s.bool_or("warm_start", d.warm_start)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Discounted reward-to-go G_t for one trajectory.
pub fn reward_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        g[t] = acc;
    }
    g
}

/// Time-dependent average-return baseline: b_t is the mean of G_t over the
/// trajectories still alive at step t.
pub fn time_baseline(returns: &[Vec<f64>]) -> Vec<f64> {
    let max_len = returns.iter().map(Vec::len).max().unwrap_or(0);
    let mut b = vec![0.0; max_len];
    for (t, bt) in b.iter_mut().enumerate() {
        let alive: Vec<f64> = returns
            .iter()
            .filter_map(|g| g.get(t).copied())
            .collect();
        *bt = alive.iter().sum::<f64>() / alive.len() as f64;
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgDiagnostics {
    pub avg_discounted_return: f64,
    pub avg_undiscounted_return: f64,
    pub episodes: usize,
    pub crashes: usize,
    pub timesteps: usize,
    pub grad_norm: f64,
    /// True when the update was skipped because the gradient was non-finite.
    pub skipped: bool,
}

/// One REINFORCE update from a batch of trajectories. Returns diagnostics;
/// on a non-finite gradient the parameters are left untouched and the
/// update is reported as skipped.
pub fn pg_update(
    params: &mut PolicyParams,
    batch: &[Trajectory],
    opt: &mut AdagradState,
    cfg: &PgConfig,
) -> Result<PgDiagnostics> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty trajectory batch".into()));
    }
    let returns: Vec<Vec<f64>> = batch
        .iter()
        .map(|tr| {
            let rewards: Vec<f64> = tr.steps.iter().map(|s| s.reward).collect();
            reward_to_go(&rewards, cfg.gamma)
        })
        .collect();
    let baseline = time_baseline(&returns);
    let timesteps: usize = batch.iter().map(|tr| tr.steps.len()).sum();

    // Per-trajectory gradients in parallel, reduced in fixed order.
    let items: Vec<usize> = (0..batch.len()).collect();
    let partials = map_ordered(&items, |&i| -> Result<PolicyGrad> {
        let mut g = PolicyGrad::zeros_like(params);
        for (t, step) in batch[i].steps.iter().enumerate() {
            let adv = returns[i][t] - baseline[t];
            let (_, glp) = grad_log_prob(params, &step.obs, step.action)?;
            g.add_scaled(&glp, adv);
        }
        Ok(g)
    });
    let mut grad = PolicyGrad::zeros_like(params);
    for p in partials {
        grad.add_scaled(&p?, 1.0);
    }
    grad.scale(1.0 / timesteps as f64);

    // Ascend: the shared optimizer descends, so negate.
    let mut step = grad.flat();
    for v in &mut step {
        *v = -*v;
    }
    let grad_norm = step.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut flat = params.flat();
    let skipped = match adagrad_update(
        &mut flat,
        &step,
        opt,
        cfg.learning_rate,
        cfg.adagrad_epsilon,
        cfg.gradient_clip_norm,
    ) {
        Ok(()) => {
            params.set_flat(&flat);
            false
        }
        Err(_) => true,
    };

    let n = batch.len() as f64;
    Ok(PgDiagnostics {
        avg_discounted_return: batch.iter().map(|t| t.discounted_return).sum::<f64>() / n,
        avg_undiscounted_return: batch.iter().map(|t| t.undiscounted_return).sum::<f64>() / n,
        episodes: batch.len(),
        crashes: batch.iter().filter(|t| t.crashed).count(),
        timesteps,
        grad_norm,
        skipped,
    })
}

/// Collect one batch of trajectories with per-episode RNG streams. Episode
/// j of iteration i always uses the same stream, so results are
/// independent of thread scheduling.
pub fn collect_batch(
    params: &PolicyParams,
    cacc: &CaccConfig,
    backend: EgoBackend,
    cfg: &PgConfig,
    seed: u64,
    iteration: usize,
) -> Result<Vec<Trajectory>> {
    let wave = usize::max(1, cfg.batch_size.div_ceil(cfg.horizon));
    let mut batch: Vec<Trajectory> = Vec::new();
    let mut next_episode = 0usize;
    while batch.iter().map(|t| t.steps.len()).sum::<usize>() < cfg.batch_size {
        let results = map_indexed(wave, |j| -> Result<Trajectory> {
            let stream = (iteration as u64) << 20 | (next_episode + j) as u64;
            let mut rng = crate::util::stream_rng(seed, stream);
            let mut env = CaccEnv::reset(cacc, backend, &mut rng);
            rollout(
                &mut env,
                |obs| {
                    let (mean, std) = policy_forward(obs, params).expect("policy forward");
                    sample_action(mean, std, &mut rng)
                },
                cfg.horizon,
            )
        });
        for r in results {
            batch.push(r?);
        }
        next_episode += wave;
        if next_episode > 10_000 {
            return Err(Error::Stage {
                stage: "collect_batch".into(),
                msg: "could not reach batch_size; episodes truncating too early".into(),
            });
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgIterRecord {
    pub iteration: usize,
    pub avg_discounted_return: f64,
    pub avg_undiscounted_return: f64,
    /// Deterministic (mean-action) held-out return used for checkpoint
    /// selection.
    pub eval_return: f64,
    pub episodes: usize,
    pub crashes: usize,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct PgResult {
    /// Best iterate by average discounted return.
    pub params: PolicyParams,
    pub final_params: PolicyParams,
    pub curve: Vec<PgIterRecord>,
    pub best_iteration: usize,
}

/// Reference feedback law used for the warm start: throttle around the
/// cruise operating point, proportional in gap error and speed error,
/// with the negative part routed to the brake channel.
pub fn reference_law(obs: &[f64], bias: f64) -> [f64; 2] {
    let (v_l, v_e, gap, desired) = (obs[0], obs[1], obs[2], obs[3]);
    let u = bias + 3.0 * (gap - desired) + 10.0 * (v_l - v_e);
    if u >= 0.0 {
        [u.min(100.0), 0.0]
    } else {
        [0.0, (-u).min(100.0)]
    }
}

/// Behavior-clone `params` onto `reference_law` by seeded full-batch
/// regression over observations drawn from the regulation envelope.
/// With log_std pinned at 0 the log-density gradient of the target
/// action equals the negative squared-error gradient of the mean, so
/// the REINFORCE machinery doubles as the regression optimizer.
/// Draw one observation from the regulation envelope. Half the samples
/// stay near the regulation point, where the evaluation tolerances demand
/// the most fidelity.
fn sample_regulation_obs(cacc: &CaccConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v_l = rng.gen_range(cacc.v_leader_min..=cacc.v_leader_max);
    let (dv_r, ge_r) = if rng.gen_range(0.0..1.0) < 0.5 {
        (1.5, 4.0)
    } else {
        (4.0, 30.0)
    };
    let dv = rng.gen_range(-dv_r..=dv_r);
    let v_e = (v_l - dv).max(0.0);
    let tg = rng.gen_range(cacc.tg_min..=cacc.tg_max);
    let gap_err = rng.gen_range(-ge_r..=ge_r);
    let mut o = vec![v_l, v_e, v_e * tg + gap_err, v_e * tg];
    if !cacc.flat {
        o.push(rng.gen_range(-cacc.grade_range..=cacc.grade_range));
    }
    o
}

/// Root-mean-square distance between the policy's mean action and the
/// reference law over freshly sampled regulation-envelope observations.
fn clone_rms(
    params: &PolicyParams,
    cacc: &CaccConfig,
    bias: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = 2000;
    let mut sum = 0.0;
    for _ in 0..n {
        let o = sample_regulation_obs(cacc, rng);
        let target = reference_law(&o, bias);
        let mean = act_mean(&o, params)?;
        sum += (mean[0] - target[0]).powi(2) + (mean[1] - target[1]).powi(2);
    }
    Ok((sum / n as f64).sqrt())
}

pub fn warm_start(
    params: &mut PolicyParams,
    cacc: &CaccConfig,
    cfg: &PgConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let saved_log_std = params.log_std;
    params.log_std = [0.0, 0.0];
    let bias = cfg.action_bias_init[0];
    let batch = 512;
    let steps = 3000;
    let mut opt = AdagradState::new(params.param_count());
    for _ in 0..steps {
        let obs_batch: Vec<Vec<f64>> =
            (0..batch).map(|_| sample_regulation_obs(cacc, rng)).collect();
        let mut grad = PolicyGrad::zeros_like(params);
        for o in &obs_batch {
            let target = reference_law(o, bias);
            let (_, g) = grad_log_prob(params, o, target)?;
            grad.add_scaled(&g, 1.0);
        }
        grad.scale(1.0 / batch as f64);
        grad.log_std = [0.0, 0.0];
        let mut step = grad.flat();
        for v in &mut step {
            *v = -*v; // ascend the log-density = descend the squared error
        }
        let mut flat = params.flat();
        adagrad_update(&mut flat, &step, &mut opt, 0.5, cfg.adagrad_epsilon, None)?;
        params.set_flat(&flat);
        params.log_std = [0.0, 0.0];
    }
    params.log_std = saved_log_std;
    Ok(())
}

/// Average discounted return of the mean-action policy over a small fixed
/// set of held-out initial conditions (streams disjoint from the training
/// episodes, which never exceed stream 2^40).
pub fn deterministic_eval(
    params: &PolicyParams,
    cacc: &CaccConfig,
    backend: EgoBackend,
    cfg: &PgConfig,
    seed: u64,
) -> Result<f64> {
    let trials = 5;
    let results = map_indexed(trials, |j| -> Result<f64> {
        let mut rng = crate::util::stream_rng(seed, (1 << 41) + j as u64);
        let mut env = CaccEnv::reset(cacc, backend, &mut rng);
        let tr = rollout(&mut env, |obs| act_mean(obs, params).expect("policy forward"), cfg.horizon)?;
        Ok(tr.discounted_return)
    });
    let mut sum = 0.0;
    for r in results {
        sum += r?;
    }
    Ok(sum / trials as f64)
}

pub fn train_policy(
    cacc: &CaccConfig,
    backend: EgoBackend,
    cfg: &PgConfig,
    seed: u64,
) -> Result<PgResult> {
    cfg.validate()?;
    let (offset, scale) = obs_normalization(cacc);
    let mut rng = crate::util::stream_rng(seed, u64::MAX);
    let fresh_init = |rng: &mut ChaCha8Rng| -> Result<PolicyParams> {
        let mut p = PolicyParams::init(
            cacc.obs_dim(),
            &cfg.hidden,
            cfg.log_std_init,
            offset.clone(),
            scale.clone(),
            rng,
        )?;
        if let Some(head) = p.layers.last_mut() {
            head.b.copy_from_slice(&cfg.action_bias_init);
        }
        Ok(p)
    };
    let mut params = fresh_init(&mut rng)?;
    if cfg.warm_start {
        // The regression occasionally lands in a bad basin from an
        // unlucky weight draw; keep re-drawing until the clone tracks
        // the reference law, retaining the closest attempt.
        let mut best: Option<(f64, PolicyParams)> = None;
        for _attempt in 0..5 {
            warm_start(&mut params, cacc, cfg, &mut rng)?;
            let rms = clone_rms(&params, cacc, cfg.action_bias_init[0], &mut rng)?;
            if best.as_ref().map_or(true, |(b, _)| rms < *b) {
                best = Some((rms, params.clone()));
            }
            if best.as_ref().expect("set above").0 < 3.0 {
                break;
            }
            params = fresh_init(&mut rng)?;
        }
        params = best.expect("at least one attempt").1;
    }
    let mut opt = AdagradState::new(params.param_count());
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut best = params.clone();
    let mut best_return = f64::NEG_INFINITY;
    let mut best_iteration = 0;
    for i in 0..cfg.iterations {
        let batch = collect_batch(&params, cacc, backend, cfg, seed, i)?;
        // Checkpoint selection scores the pre-update parameters (the ones
        // that collected this batch) with deterministic rollouts on a
        // fixed set of held-out initial conditions; the stochastic batch
        // average is far too noisy at small batch sizes to pick by.
        let eval_return = deterministic_eval(&params, cacc, backend, cfg, seed)?;
        let collected_with = params.clone();
        let diag = pg_update(&mut params, &batch, &mut opt, cfg)?;
        if eval_return > best_return {
            best_return = eval_return;
            best = collected_with;
            best_iteration = i;
        }
        curve.push(PgIterRecord {
            iteration: i,
            avg_discounted_return: diag.avg_discounted_return,
            avg_undiscounted_return: diag.avg_undiscounted_return,
            eval_return,
            episodes: diag.episodes,
            crashes: diag.crashes,
            grad_norm: diag.grad_norm,
        });
    }
    Ok(PgResult {
        params: best,
        final_params: params,
        curve,
        best_iteration,
    })
}

pub fn write_pg_curve(curve: &[PgIterRecord], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        "iteration,avg_discounted_return,avg_undiscounted_return,eval_return,episodes,crashes,grad_norm\n",
    );
    for r in curve {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{},{},{:.16e}\n",
            r.iteration,
            r.avg_discounted_return,
            r.avg_undiscounted_return,
            r.eval_return,
            r.episodes,
            r.crashes,
            r.grad_norm
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
