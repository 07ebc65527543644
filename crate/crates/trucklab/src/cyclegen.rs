//! Stochastic driving-cycle generation: a road-profile random walk plus a
//! time-adaptive unstable stochastic speed controller that spans the speed
//! state space, with moving-average smoothing and softmax re-integration.
//! Produces the three episode families used for replica training: spanning
//! acceleration profiles, coasting, and braking to zero.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::config::KvFile;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::plant::{plant_step, ControlInput, PlantConfig, PlantState};

#[derive(Debug, Clone, PartialEq)]
pub struct CycleGenConfig {
    pub v_min: f64,
    pub v_max: f64,
    pub v_ref: f64,
    pub mu_a_scaling: f64,
    pub sigma_a_scaling: f64,
    /// Mean of the resample-interval draw [s].
    pub mu_t: f64,
    /// Its standard deviation [s]; the interval distribution is otherwise unstated.
    pub mu_t_std: f64,
    pub dt: f64,
    pub smoothing_window: usize,
    /// Road random-walk step standard deviation [percent/step]; 0 disables grade.
    pub road_walk_step_std: f64,
    pub road_ma_window: usize,
    pub grade_limit: f64,
    pub seed: u64,
    /// Flat mode: grade forced to zero and omitted from episodes (w_dim = 0).
    pub flat: bool,
}

impl Default for CycleGenConfig {
    fn default() -> Self {
        CycleGenConfig {
            v_min: 0.0,
            v_max: 35.0,
            v_ref: 17.5,
            mu_a_scaling: 1.0,
            // Wide enough that an hour of spanning profiles visits every
            // decile of [v_min, v_max] despite the mean's pull toward v_ref.
            sigma_a_scaling: 4.0,
            mu_t: 2.0,
            mu_t_std: 1.0,
            dt: 0.1,
            smoothing_window: 15,
            road_walk_step_std: 0.02,
            road_ma_window: 50,
            grade_limit: 3.0,
            seed: 0,
            flat: false,
        }
    }
}

impl CycleGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min >= 0.0 && self.v_min < self.v_max) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= v_min < v_max, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if !(self.mu_a_scaling > 0.0 && self.sigma_a_scaling > 0.0) {
            return Err(Error::InvalidConfig("scalings must be > 0".into()));
        }
        if self.mu_t < self.dt {
            return Err(Error::InvalidConfig("mu_T must be >= dt".into()));
        }
        if self.smoothing_window < 1 || self.road_ma_window < 1 {
            return Err(Error::InvalidConfig("windows must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = CycleGenConfig::default();
        let Some(s) = kv.section("cyclegen") else {
            return Ok(d);
        };
        let v_min = s.f64_or("v_min", d.v_min)?;
        let v_max = s.f64_or("v_max", d.v_max)?;
        let cfg = CycleGenConfig {
            v_min,
            v_max,
            v_ref: s.f64_or("v_ref", (v_min + v_max) / 2.0)?,
            mu_a_scaling: s.f64_or("mu_a_scaling", d.mu_a_scaling)?,
            sigma_a_scaling: s.f64_or("sigma_a_scaling", d.sigma_a_scaling)?,
            mu_t: s.f64_or("mu_T", d.mu_t)?,
            mu_t_std: s.f64_or("mu_T_std", d.mu_t_std)?,
            dt: s.f64_or("dt", d.dt)?,
            smoothing_window: s.usize_or("smoothing_window", d.smoothing_window)?,
            road_walk_step_std: s.f64_or("road_walk_step_std", d.road_walk_step_std)?,
            road_ma_window: s.usize_or("road_ma_window", d.road_ma_window)?,
            grade_limit: s.f64_or("grade_limit", d.grade_limit)?,
            seed: s.u64_or("seed", d.seed)?,
            flat: s.bool_or("flat", d.flat)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub t: Vec<f64>,
    pub v_raw: Vec<f64>,
    pub a_raw: Vec<f64>,
    pub v_f: Vec<f64>,
    pub a_f: Vec<f64>,
    pub resample_times: Vec<f64>,
}

/// Mean of the acceleration law at speed v (unscaled).
pub fn accel_mean(v: f64, cfg: &CycleGenConfig) -> f64 {
    1.0 - v / cfg.v_ref
}

/// Standard deviation of the acceleration law at speed v (unscaled),
/// clamped at zero where the expression goes negative.
pub fn accel_std(v: f64, cfg: &CycleGenConfig) -> f64 {
    ((v / cfg.v_ref) * (1.0 - v / cfg.v_max)).max(0.0)
}

pub fn sample_acceleration(v_at_ti: f64, cfg: &CycleGenConfig, rng: &mut ChaCha8Rng) -> f64 {
    let mean = cfg.mu_a_scaling * accel_mean(v_at_ti, cfg);
    let std = cfg.sigma_a_scaling * accel_std(v_at_ti, cfg);
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).unwrap().sample(rng)
}

/// Next adaptive resample time. The interval is the drawn duration scaled
/// by (1 - |mu_a|), floored at dt, then raised to the next multiple of dt.
pub fn next_resample_time(t_i: f64, mu_a_now: f64, cfg: &CycleGenConfig, rng: &mut ChaCha8Rng) -> f64 {
    let draw = Normal::new(cfg.mu_t, cfg.mu_t_std).unwrap().sample(rng);
    let factor = 1.0 - mu_a_now.abs();
    let raw = if factor <= 0.0 { cfg.dt } else { (draw * factor).max(cfg.dt) };
    let steps = ((raw / cfg.dt) - 1e-9).ceil().max(1.0);
    t_i + steps * cfg.dt
}

/// Double-integrator speed profile with hard saturation, acceleration held
/// constant between resample instants.
pub fn integrate_raw_speed(cfg: &CycleGenConfig, rng: &mut ChaCha8Rng, duration: f64) -> Result<SpeedProfile> {
    if duration < cfg.dt {
        return Err(Error::InvalidInput(format!("duration {duration} < dt {}", cfg.dt)));
    }
    let n = (duration / cfg.dt).round() as usize + 1;
    let mut t = Vec::with_capacity(n);
    let mut v_raw = Vec::with_capacity(n);
    let mut a_raw = Vec::with_capacity(n);
    let mut resample_times = Vec::new();

    let mut v = cfg.v_min;
    let mut a = sample_acceleration(v, cfg, rng);
    let mut next_t = {
        let mu = accel_mean(v, cfg);
        next_resample_time(0.0, mu, cfg, rng)
    };
    resample_times.push(0.0);

    for k in 0..n {
        let tk = k as f64 * cfg.dt;
        if k > 0 {
            v = (v + a * cfg.dt).min(cfg.v_max).max(cfg.v_min);
        }
        if tk + 1e-9 >= next_t {
            a = sample_acceleration(v, cfg, rng);
            let mu = accel_mean(v, cfg);
            resample_times.push(next_t);
            next_t = next_resample_time(next_t, mu, cfg, rng);
        }
        t.push(tk);
        v_raw.push(v);
        a_raw.push(a);
    }
    Ok(SpeedProfile {
        t,
        v_raw,
        a_raw,
        v_f: Vec::new(),
        a_f: Vec::new(),
        resample_times,
    })
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Single step of the softmax re-integration recurrence.
pub fn softmax_reintegrate_step(v_prev: f64, a_f: f64, cfg: &CycleGenConfig) -> f64 {
    let s = (v_prev + a_f * cfg.dt).max(cfg.v_min);
    s / (1.0 + (0.5 * (s - cfg.v_max)).exp())
}

/// Smooth the raw acceleration with a centered moving average, re-integrate
/// speed through the softmax recurrence, then recompute the acceleration as
/// the first finite difference of the smoothed speed.
pub fn smooth_and_reintegrate(profile: &SpeedProfile, cfg: &CycleGenConfig) -> SpeedProfile {
    let a_smooth = moving_average(&profile.a_raw, cfg.smoothing_window);
    let n = profile.v_raw.len();
    let mut v_f = Vec::with_capacity(n);
    v_f.push(profile.v_raw[0]);
    for k in 1..n {
        v_f.push(softmax_reintegrate_step(v_f[k - 1], a_smooth[k], cfg));
    }
    let mut a_f = Vec::with_capacity(n);
    a_f.push(0.0);
    for k in 1..n {
        a_f.push((v_f[k] - v_f[k - 1]) / cfg.dt);
    }
    SpeedProfile {
        t: profile.t.clone(),
        v_raw: profile.v_raw.clone(),
        a_raw: profile.a_raw.clone(),
        v_f,
        a_f,
        resample_times: profile.resample_times.clone(),
    }
}

/// Moving-average random walk road grade, clamped to +-grade_limit.
pub fn generate_road_profile(cfg: &CycleGenConfig, rng: &mut ChaCha8Rng, duration: f64) -> Result<Vec<f64>> {
    if duration < cfg.dt {
        return Err(Error::InvalidInput(format!("duration {duration} < dt {}", cfg.dt)));
    }
    let n = (duration / cfg.dt).round() as usize + 1;
    if cfg.flat || cfg.road_walk_step_std == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let normal = Normal::new(0.0, cfg.road_walk_step_std).unwrap();
    let mut walk = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..n {
        acc += normal.sample(rng);
        walk.push(acc);
    }
    let smoothed = moving_average(&walk, cfg.road_ma_window);
    Ok(smoothed
        .into_iter()
        .map(|g| g.clamp(-cfg.grade_limit, cfg.grade_limit))
        .collect())
}

/// Proportional speed tracker turning a reference profile into plant
/// commands, with a deadband that forbids simultaneous engine and brake.
#[derive(Debug, Clone, Copy)]
pub struct SpeedTracker {
    pub kp_engine: f64,
    pub kp_brake: f64,
    pub deadband: f64,
}

impl Default for SpeedTracker {
    fn default() -> Self {
        SpeedTracker {
            kp_engine: 40.0,
            kp_brake: 25.0,
            deadband: 0.05,
        }
    }
}

impl SpeedTracker {
    pub fn command(&self, v_ref: f64, v_actual: f64) -> ControlInput {
        let err = v_ref - v_actual;
        if err > self.deadband {
            ControlInput::new((self.kp_engine * err).clamp(0.0, 100.0), 0.0)
        } else if err < -self.deadband {
            ControlInput::new(0.0, (-self.kp_brake * err).clamp(0.0, 100.0))
        } else {
            ControlInput::new(0.0, 0.0)
        }
    }
}

fn episode_shell(cfg: &CycleGenConfig, plant_cfg: &PlantConfig, generator: &str, seed: u64) -> Episode {
    Episode {
        dt: cfg.dt,
        e_cmd: Vec::new(),
        b_cmd: Vec::new(),
        grade: (!cfg.flat).then(Vec::new),
        v: Vec::new(),
        a: Vec::new(),
        f_rate: Vec::new(),
        seed,
        generator: generator.to_string(),
        plant_hash: plant_cfg.hash_hex(),
    }
}

fn push_row(ep: &mut Episode, u: ControlInput, grade: f64, v: f64, a: f64, f_rate: f64) {
    ep.e_cmd.push(u.engine_pct);
    ep.b_cmd.push(u.brake_pct);
    if let Some(g) = ep.grade.as_mut() {
        g.push(grade);
    }
    ep.v.push(v);
    ep.a.push(a);
    ep.f_rate.push(f_rate);
}

/// Run the plant from `state` over a per-step command function, appending
/// rows until `stop` fires or `max_steps` elapse.
fn drive_plant<F, S>(
    ep: &mut Episode,
    plant_cfg: &PlantConfig,
    mut state: PlantState,
    grade: &[f64],
    max_steps: usize,
    mut command: F,
    mut stop: S,
) -> Result<()>
where
    F: FnMut(usize, &PlantState) -> ControlInput,
    S: FnMut(usize, &PlantState) -> bool,
{
    push_row(
        ep,
        ControlInput::new(0.0, 0.0),
        grade.first().copied().unwrap_or(0.0),
        state.v,
        0.0,
        plant_cfg.idle_fuel_rate + plant_cfg.fuel_per_torque * state.engine_torque_actual,
    );
    for k in 0..max_steps {
        let g = grade.get(k).copied().unwrap_or_else(|| *grade.last().unwrap_or(&0.0));
        let u = command(k, &state);
        let (next, r) = plant_step(&state, u, g, plant_cfg)?;
        // The command that produced row k+1 is logged at row k.
        let last = ep.len() - 1;
        ep.e_cmd[last] = u.engine_pct;
        ep.b_cmd[last] = u.brake_pct;
        push_row(ep, ControlInput::new(0.0, 0.0), g, r.v, r.a, r.f_rate);
        state = next;
        if stop(k, &state) {
            break;
        }
    }
    Ok(())
}

pub fn generate_coasting_episode(
    cfg: &CycleGenConfig,
    rng: &mut ChaCha8Rng,
    plant_cfg: &PlantConfig,
) -> Result<Episode> {
    let max_steps = (180.0 / cfg.dt) as usize;
    let grade = generate_road_profile(cfg, rng, 180.0)?;
    let v0 = Uniform::new_inclusive(cfg.v_min, cfg.v_max).sample(rng);
    let mut ep = episode_shell(cfg, plant_cfg, "coasting", cfg.seed);
    let eps = 0.2;
    let floor = cfg.v_min;
    drive_plant(
        &mut ep,
        plant_cfg,
        PlantState::at_speed(v0, plant_cfg),
        &grade,
        max_steps,
        |_, _| ControlInput::new(0.0, 0.0),
        |_, s| s.v <= floor + eps,
    )?;
    Ok(ep)
}

pub fn generate_braking_episode(
    cfg: &CycleGenConfig,
    rng: &mut ChaCha8Rng,
    plant_cfg: &PlantConfig,
) -> Result<Episode> {
    let max_steps = (120.0 / cfg.dt) as usize;
    let grade = generate_road_profile(cfg, rng, 120.0)?;
    let v0 = Uniform::new_inclusive(cfg.v_min.max(1.0), cfg.v_max).sample(rng);
    let b_cmd = Uniform::new_inclusive(10.0, 100.0).sample(rng);
    let mut ep = episode_shell(cfg, plant_cfg, "braking", cfg.seed);
    drive_plant(
        &mut ep,
        plant_cfg,
        PlantState::at_speed(v0, plant_cfg),
        &grade,
        max_steps,
        |_, _| ControlInput::new(0.0, b_cmd),
        |_, s| s.v == 0.0,
    )?;
    Ok(ep)
}

/// Track a smoothed spanning profile on the plant; the logged episode holds
/// the actual plant responses, not the reference.
pub fn generate_spanning_episode(
    cfg: &CycleGenConfig,
    rng: &mut ChaCha8Rng,
    plant_cfg: &PlantConfig,
    tracker: &SpeedTracker,
    duration: f64,
) -> Result<Episode> {
    let raw = integrate_raw_speed(cfg, rng, duration)?;
    let profile = smooth_and_reintegrate(&raw, cfg);
    let grade = generate_road_profile(cfg, rng, duration)?;
    let mut ep = episode_shell(cfg, plant_cfg, "spanning", cfg.seed);
    let v_f = profile.v_f;
    let steps = v_f.len() - 1;
    drive_plant(
        &mut ep,
        plant_cfg,
        PlantState::at_speed(v_f[0], plant_cfg),
        &grade,
        steps,
        |k, s| tracker.command(v_f[(k + 1).min(steps)], s.v),
        |_, _| false,
    )?;
    Ok(ep)
}
