//! Parametric surrogate truck: a low-order but nonlinear and hybrid
//! longitudinal plant (gear hysteresis, first-order actuator lags,
//! quadratic drag) used as ground truth for data generation and for
//! measuring replica fidelity and policy transfer.

use crate::config::KvFile;
use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.80665;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub mass: f64,
    pub max_engine_torque: f64,
    /// Overall drive ratios (gearbox x final drive), strictly decreasing.
    pub gear_ratios: Vec<f64>,
    /// Upshift speed per gear; last entry is never reached.
    pub shift_up_speed: Vec<f64>,
    /// Downshift speed per gear; first entry is 0.
    pub shift_down_speed: Vec<f64>,
    pub wheel_radius: f64,
    /// Lumped aerodynamic coefficient: drag force = c * v^2 [N/(m/s)^2].
    pub drag_coefficient: f64,
    pub rolling_resistance_coefficient: f64,
    /// Deceleration at 100% brake command [m/s^2].
    pub max_brake_decel: f64,
    pub brake_lag_time_constant: f64,
    pub engine_lag_time_constant: f64,
    pub idle_fuel_rate: f64,
    pub fuel_per_torque: f64,
    pub dt: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let n = 10;
        let shift_up: Vec<f64> = (0..n)
            .map(|g| if g + 1 == n { f64::MAX } else { 3.5 + 3.5 * g as f64 })
            .collect();
        let shift_down: Vec<f64> = (0..n)
            .map(|g| if g == 0 { 0.0 } else { shift_up[g - 1] - 1.5 })
            .collect();
        PlantConfig {
            mass: 15000.0,
            max_engine_torque: 2000.0,
            gear_ratios: (0..n).map(|g| 18.0 * (2.5f64 / 18.0).powf(g as f64 / (n - 1) as f64)).collect(),
            shift_up_speed: shift_up,
            shift_down_speed: shift_down,
            wheel_radius: 0.5,
            drag_coefficient: 2.9,
            rolling_resistance_coefficient: 0.007,
            max_brake_decel: 6.0,
            brake_lag_time_constant: 0.5,
            engine_lag_time_constant: 0.6,
            idle_fuel_rate: 0.8,
            fuel_per_torque: 0.01,
            dt: 0.1,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("max_engine_torque", self.max_engine_torque),
            ("wheel_radius", self.wheel_radius),
            ("drag_coefficient", self.drag_coefficient),
            ("rolling_resistance_coefficient", self.rolling_resistance_coefficient),
            ("max_brake_decel", self.max_brake_decel),
            ("brake_lag_time_constant", self.brake_lag_time_constant),
            ("engine_lag_time_constant", self.engine_lag_time_constant),
            ("idle_fuel_rate", self.idle_fuel_rate),
            ("fuel_per_torque", self.fuel_per_torque),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        let n = self.gear_ratios.len();
        if n < 2 {
            return Err(Error::InvalidConfig("need at least 2 gears".into()));
        }
        if self.shift_up_speed.len() != n || self.shift_down_speed.len() != n {
            return Err(Error::InvalidConfig("shift tables must match gear count".into()));
        }
        if !self.gear_ratios.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig("gear_ratios must be strictly decreasing".into()));
        }
        for g in 0..n {
            if !(self.shift_down_speed[g] < self.shift_up_speed[g]) {
                return Err(Error::InvalidConfig(format!(
                    "gear {g}: hysteresis band empty (down {} >= up {})",
                    self.shift_down_speed[g], self.shift_up_speed[g]
                )));
            }
        }
        Ok(())
    }

    /// Read from the `[plant]` section of a key=value file, falling back to
    /// defaults for absent keys.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = PlantConfig::default();
        let Some(s) = kv.section("plant") else {
            return Ok(d);
        };
        let mut cfg = PlantConfig {
            mass: s.f64_or("mass", d.mass)?,
            max_engine_torque: s.f64_or("max_engine_torque", d.max_engine_torque)?,
            gear_ratios: d.gear_ratios.clone(),
            shift_up_speed: d.shift_up_speed.clone(),
            shift_down_speed: d.shift_down_speed.clone(),
            wheel_radius: s.f64_or("wheel_radius", d.wheel_radius)?,
            drag_coefficient: s.f64_or("drag_coefficient", d.drag_coefficient)?,
            rolling_resistance_coefficient: s
                .f64_or("rolling_resistance_coefficient", d.rolling_resistance_coefficient)?,
            max_brake_decel: s.f64_or("max_brake_decel", d.max_brake_decel)?,
            brake_lag_time_constant: s.f64_or("brake_lag_time_constant", d.brake_lag_time_constant)?,
            engine_lag_time_constant: s.f64_or("engine_lag_time_constant", d.engine_lag_time_constant)?,
            idle_fuel_rate: s.f64_or("idle_fuel_rate", d.idle_fuel_rate)?,
            fuel_per_torque: s.f64_or("fuel_per_torque", d.fuel_per_torque)?,
            dt: s.f64_or("dt", d.dt)?,
        };
        if s.get("gear_ratios").is_some() {
            cfg.gear_ratios = s.f64_list("gear_ratios")?;
            cfg.shift_up_speed = s.f64_list("shift_up_speed")?;
            cfg.shift_down_speed = s.f64_list("shift_down_speed")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!("{self:?}").as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub v: f64,
    pub current_gear: usize,
    pub engine_torque_actual: f64,
    pub brake_decel_actual: f64,
}

impl PlantState {
    pub fn at_rest() -> Self {
        PlantState {
            v: 0.0,
            current_gear: 0,
            engine_torque_actual: 0.0,
            brake_decel_actual: 0.0,
        }
    }

    pub fn at_speed(v: f64, cfg: &PlantConfig) -> Self {
        PlantState {
            v,
            current_gear: gear_for_speed(v, cfg),
            engine_torque_actual: 0.0,
            brake_decel_actual: 0.0,
        }
    }
}

/// Engine and brake commands, both in percent [0, 100].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub engine_pct: f64,
    pub brake_pct: f64,
}

impl ControlInput {
    pub fn new(engine_pct: f64, brake_pct: f64) -> Self {
        ControlInput { engine_pct, brake_pct }
    }
}

/// Plant response at the new time step: applied acceleration, speed,
/// fuel rate. The acceleration is the finite difference (v' - v)/dt so
/// logged episodes satisfy v(k+1) = v(k) + a(k+1)*dt exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    pub a: f64,
    pub v: f64,
    pub f_rate: f64,
}

fn gear_for_speed(v: f64, cfg: &PlantConfig) -> usize {
    let mut g = 0;
    while g + 1 < cfg.gear_ratios.len() && v > cfg.shift_up_speed[g] {
        g += 1;
    }
    g
}

fn shift_gear(gear: usize, v: f64, cfg: &PlantConfig) -> usize {
    let mut g = gear;
    while g + 1 < cfg.gear_ratios.len() && v > cfg.shift_up_speed[g] {
        g += 1;
    }
    while g > 0 && v < cfg.shift_down_speed[g] {
        g -= 1;
    }
    g
}

/// One dt step of the surrogate plant. Pure value-to-value; deterministic.
pub fn plant_step(
    state: &PlantState,
    u: ControlInput,
    grade_pct: f64,
    cfg: &PlantConfig,
) -> Result<(PlantState, Response)> {
    if !u.engine_pct.is_finite() || !u.brake_pct.is_finite() || !grade_pct.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite plant input: u=({}, {}), grade={}",
            u.engine_pct, u.brake_pct, grade_pct
        )));
    }
    if !(0.0..=100.0).contains(&u.engine_pct) || !(0.0..=100.0).contains(&u.brake_pct) {
        return Err(Error::InvalidInput(format!(
            "command out of [0,100]: ({}, {})",
            u.engine_pct, u.brake_pct
        )));
    }
    if grade_pct.abs() > 30.0 {
        return Err(Error::InvalidInput(format!("|grade| > 30%: {grade_pct}")));
    }
    step_with_dt(state, u, grade_pct, cfg, cfg.dt)
}

/// Shared force balance, parameterized by the integration step so tests can
/// run the identical dynamics at a finer resolution.
pub fn step_with_dt(
    state: &PlantState,
    u: ControlInput,
    grade_pct: f64,
    cfg: &PlantConfig,
    dt: f64,
) -> Result<(PlantState, Response)> {
    // Exact first-order lag over dt.
    let alpha_e = 1.0 - (-dt / cfg.engine_lag_time_constant).exp();
    let alpha_b = 1.0 - (-dt / cfg.brake_lag_time_constant).exp();
    let torque_target = u.engine_pct / 100.0 * cfg.max_engine_torque;
    let brake_target = u.brake_pct / 100.0 * cfg.max_brake_decel;
    let engine_torque = state.engine_torque_actual + alpha_e * (torque_target - state.engine_torque_actual);
    let brake_decel = state.brake_decel_actual + alpha_b * (brake_target - state.brake_decel_actual);

    let gear = shift_gear(state.current_gear, state.v, cfg);
    let traction = engine_torque * cfg.gear_ratios[gear] / cfg.wheel_radius;
    let drag = cfg.drag_coefficient * state.v * state.v;
    let rolling = if state.v > 0.0 {
        cfg.rolling_resistance_coefficient * cfg.mass * GRAVITY
    } else {
        0.0
    };
    let grade_force = cfg.mass * GRAVITY * (grade_pct / 100.0).atan().sin();
    let accel = (traction - drag - rolling - grade_force) / cfg.mass - brake_decel;

    let v_next = (state.v + accel * dt).max(0.0);
    let a_applied = (v_next - state.v) / dt;
    let f_rate = cfg.idle_fuel_rate + cfg.fuel_per_torque * engine_torque;

    let next = PlantState {
        v: v_next,
        current_gear: gear,
        engine_torque_actual: engine_torque,
        brake_decel_actual: brake_decel,
    };
    Ok((
        next,
        Response {
            a: a_applied,
            v: v_next,
            f_rate,
        },
    ))
}
