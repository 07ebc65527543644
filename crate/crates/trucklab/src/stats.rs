//! Per-time-step error statistics across independent trials: open-loop
//! model validation errors and closed-loop control errors, plus the
//! scenario-distribution summaries (decile histograms).

use rand::Rng;

use crate::cacc::{rollout, CaccConfig, CaccEnv, EgoBackend, Trajectory};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::model::{forward_deployment, DeepModelParams};
use crate::util::{map_indexed, stream_rng};

/// Per-step statistics for one set of channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Trials contributing to this step (crashes shorten control trials).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStatSeries {
    pub channels: Vec<String>,
    pub trials: usize,
    /// Trials dropped because the model rollout failed.
    pub excluded: usize,
    pub steps: Vec<StatRow>,
}

impl ErrorStatSeries {
    pub fn validate(&self) -> Result<()> {
        for (k, row) in self.steps.iter().enumerate() {
            for c in 0..self.channels.len() {
                if !(row.min[c] <= row.mean[c] && row.mean[c] <= row.max[c]) {
                    return Err(Error::InvalidInput(format!(
                        "step {k} channel {c}: min <= mean <= max violated"
                    )));
                }
                if row.std[c] < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "step {k} channel {c}: negative std"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Statistics across trials of per-step channel errors. Trials may have
/// different lengths; each step's statistics cover the trials that reach
/// it. `trials[m][k][c]` is the channel-c error of trial m at step k.
pub fn stat_series(trials: &[Vec<Vec<f64>>], channels: &[&str], excluded: usize) -> ErrorStatSeries {
    let n_ch = channels.len();
    let max_len = trials.iter().map(Vec::len).max().unwrap_or(0);
    let mut steps = Vec::with_capacity(max_len);
    for k in 0..max_len {
        let mut mean = vec![0.0; n_ch];
        let mut std = vec![0.0; n_ch];
        let mut min = vec![f64::INFINITY; n_ch];
        let mut max = vec![f64::NEG_INFINITY; n_ch];
        let rows: Vec<&Vec<f64>> = trials.iter().filter_map(|t| t.get(k)).collect();
        let n = rows.len() as f64;
        for c in 0..n_ch {
            let mut sum = 0.0;
            for r in &rows {
                sum += r[c];
                min[c] = min[c].min(r[c]);
                max[c] = max[c].max(r[c]);
            }
            mean[c] = sum / n;
            let mut var = 0.0;
            for r in &rows {
                var += (r[c] - mean[c]).powi(2);
            }
            std[c] = (var / n).sqrt();
        }
        steps.push(StatRow {
            mean,
            std,
            min,
            max,
            count: rows.len(),
        });
    }
    ErrorStatSeries {
        channels: channels.iter().map(|s| s.to_string()).collect(),
        trials: trials.len(),
        excluded,
        steps,
    }
}

/// Decile histogram over a fixed range; out-of-range values clamp into the
/// edge bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64) -> Self {
        Histogram {
            lo,
            hi,
            counts: vec![0; 10],
        }
    }

    pub fn add(&mut self, x: f64) {
        let t = (x - self.lo) / (self.hi - self.lo);
        let bin = ((t * 10.0).floor() as i64).clamp(0, 9) as usize;
        self.counts[bin] += 1;
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Fig.-6-style summary of the scenarios visited during validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub initial_speed: Histogram,
    pub visited_speed: Histogram,
    pub visited_grade: Histogram,
}

/// Valid (episode, k0) slice starts for a given window length.
fn slice_starts(episodes: &[Episode], horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        if ep.len() > horizon {
            for k0 in 0..ep.len() - horizon {
                out.push((i, k0));
            }
        }
    }
    out
}

/// Open-loop error statistics with a pluggable predictor. The predictor
/// returns [y(k0), yhat(k0+1), ..., yhat(k0+horizon)] for a slice.
pub fn deployment_error_stats<F>(
    episodes: &[Episode],
    horizon: usize,
    trials: usize,
    seed: u64,
    speed_range: (f64, f64),
    grade_range: (f64, f64),
    predictor: F,
) -> Result<(ErrorStatSeries, ScenarioSummary)>
where
    F: Fn(&Episode, usize, usize) -> Result<Vec<[f64; 3]>> + Sync + Send,
{
    let starts = slice_starts(episodes, horizon);
    if starts.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no episode admits a {horizon}-step slice"
        )));
    }
    let results = map_indexed(trials, |m| -> Result<(usize, usize, Vec<Vec<f64>>)> {
        let mut rng = stream_rng(seed, m as u64);
        let (ep_idx, k0) = starts[rng.gen_range(0..starts.len())];
        let ep = &episodes[ep_idx];
        let preds = predictor(ep, k0, horizon)?;
        let errs = (0..=horizon)
            .map(|k| {
                let truth = ep.y_at(k0 + k);
                (0..3).map(|c| preds[k][c] - truth[c]).collect()
            })
            .collect();
        Ok((ep_idx, k0, errs))
    });

    let mut trials_ok = Vec::new();
    let mut excluded = 0;
    let mut summary = ScenarioSummary {
        initial_speed: Histogram::new(speed_range.0, speed_range.1),
        visited_speed: Histogram::new(speed_range.0, speed_range.1),
        visited_grade: Histogram::new(grade_range.0, grade_range.1),
    };
    for r in results {
        match r {
            Ok((ep_idx, k0, errs)) => {
                let ep = &episodes[ep_idx];
                summary.initial_speed.add(ep.v[k0]);
                for k in 0..=horizon {
                    summary.visited_speed.add(ep.v[k0 + k]);
                    let g = ep.w_at(k0 + k);
                    summary.visited_grade.add(g.first().copied().unwrap_or(0.0));
                }
                trials_ok.push(errs);
            }
            Err(_) => excluded += 1,
        }
    }
    let series = stat_series(&trials_ok, &["a", "v", "f_rate"], excluded);
    series.validate()?;
    Ok((series, summary))
}

/// Open-loop validation of a trained deep model against held-out episodes,
/// per-trial initialized at the ground-truth y(k0).
pub fn model_error_stats(
    params: &DeepModelParams,
    episodes: &[Episode],
    horizon: usize,
    trials: usize,
    seed: u64,
    speed_range: (f64, f64),
    grade_range: (f64, f64),
) -> Result<(ErrorStatSeries, ScenarioSummary)> {
    deployment_error_stats(
        episodes,
        horizon,
        trials,
        seed,
        speed_range,
        grade_range,
        |ep, k0, h| {
            let u: Vec<[f64; 2]> = (0..h).map(|j| ep.u_at(k0 + j)).collect();
            let w: Vec<f64> = if params.io.w_dim == 1 {
                (0..h).map(|j| ep.w_at(k0 + j)[0]).collect()
            } else {
                Vec::new()
            };
            forward_deployment(params, &u, &w, ep.y_at(k0), h)
        },
    )
}

/// Closed-loop control error statistics over the logged trajectories.
/// Channels: gap error [m], time-gap error [s], speed error [m/s].
pub fn control_error_stats_from(trajectories: &[Trajectory]) -> ErrorStatSeries {
    let trials: Vec<Vec<Vec<f64>>> = trajectories
        .iter()
        .map(|tr| {
            tr.steps
                .iter()
                .map(|s| {
                    let v_ego = s.obs[1];
                    let tg_err = if v_ego > 0.0 {
                        s.gap_error / v_ego
                    } else {
                        f64::INFINITY
                    };
                    vec![s.gap_error, tg_err, s.speed_error]
                })
                .collect()
        })
        .collect();
    stat_series(&trials, &["gap_error", "time_gap_error", "speed_error"], 0)
}

/// Deterministic (mean-action) policy evaluation: `trials` rollouts with
/// per-trial RNG streams. Returns the stats, the crash count, and the raw
/// trajectories for CSV retention.
pub fn control_error_stats(
    policy: &crate::policy::PolicyParams,
    cacc: &CaccConfig,
    backend: EgoBackend,
    trials: usize,
    seed: u64,
) -> Result<(ErrorStatSeries, usize, Vec<Trajectory>)> {
    let results = map_indexed(trials, |m| -> Result<Trajectory> {
        let mut rng = stream_rng(seed, m as u64);
        let mut env = CaccEnv::reset(cacc, backend, &mut rng);
        rollout(
            &mut env,
            |obs| crate::policy::act_mean(obs, policy).expect("policy forward"),
            cacc.horizon,
        )
    });
    let mut trajectories = Vec::with_capacity(trials);
    for r in results {
        trajectories.push(r?);
    }
    let crashes = trajectories.iter().filter(|t| t.crashed).count();
    let series = control_error_stats_from(&trajectories);
    series.validate()?;
    Ok((series, crashes, trajectories))
}

pub fn write_stats(series: &ErrorStatSeries, dt: f64, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# trials={} excluded={}\n",
        series.trials, series.excluded
    ));
    out.push_str("k,t");
    for ch in &series.channels {
        out.push_str(&format!(",{ch}_mean,{ch}_std,{ch}_min,{ch}_max"));
    }
    out.push_str(",count\n");
    for (k, row) in series.steps.iter().enumerate() {
        out.push_str(&format!("{},{:.16e}", k, k as f64 * dt));
        for c in 0..series.channels.len() {
            out.push_str(&format!(
                ",{:.16e},{:.16e},{:.16e},{:.16e}",
                row.mean[c], row.std[c], row.min[c], row.max[c]
            ));
        }
        out.push_str(&format!(",{}\n", row.count));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_histogram(h: &Histogram, name: &str, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# {name}: range [{}, {}]\n", h.lo, h.hi));
    out.push_str("bin,lo,hi,count\n");
    let w = (h.hi - h.lo) / 10.0;
    for (i, &c) in h.counts.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{}\n",
            i,
            h.lo + i as f64 * w,
            h.lo + (i + 1) as f64 * w,
            c
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write one rollout trajectory as a plot-ready CSV.
pub fn write_trajectory(tr: &Trajectory, dt: f64, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# crashed={} discounted_return={:.16e}\n",
        tr.crashed, tr.discounted_return
    ));
    out.push_str("k,t,v_leader,v_ego,gap,desired_gap,E_cmd,B_cmd,r,gap_error,speed_error\n");
    for (k, s) in tr.steps.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            k,
            k as f64 * dt,
            s.obs[0],
            s.obs[1],
            s.obs[2],
            s.obs[3],
            s.action[0].clamp(0.0, 100.0),
            s.action[1].clamp(0.0, 100.0),
            s.reward,
            s.gap_error,
            s.speed_error
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
