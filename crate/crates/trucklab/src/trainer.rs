//! K-step unfolded time-series mini-batch Adagrad training of the deep
//! model: teacher-forced forward passes, manual backpropagation through
//! time (including the kinematic-constraint path), and per-epoch learning
//! curves in both training and deployment form.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{
    decode_traced, forward_deployment, lstm_step_traced, Activation, DeepModelParams, HiddenState,
};
use crate::util::map_ordered;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Unroll length K.
    pub k_steps: usize,
    /// Samples per gradient estimate M.
    pub batch_samples: usize,
    /// Mini-batches per epoch N.
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub gradient_clip_norm: Option<f64>,
    pub split_seed: u64,
    pub validation_fraction: f64,
    pub hidden: usize,
    pub decoder_hidden: Vec<usize>,
    /// Deployment-form validation rollout length (40 s at 10 Hz).
    pub deploy_eval_steps: usize,
    pub deploy_eval_trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_steps: 64,
            batch_samples: 32,
            batches_per_epoch: 8,
            epochs: 600,
            learning_rate: 0.05,
            adagrad_epsilon: 1e-8,
            gradient_clip_norm: Some(5.0),
            split_seed: 0,
            validation_fraction: 0.2,
            hidden: crate::model::DEFAULT_HIDDEN,
            decoder_hidden: crate::model::DEFAULT_DECODER_HIDDEN.to_vec(),
            deploy_eval_steps: 400,
            deploy_eval_trials: 12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_steps < 1 || self.batch_samples < 1 || self.batches_per_epoch < 1 {
            return Err(Error::InvalidConfig("K, M, N must all be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.adagrad_epsilon > 0.0) {
            return Err(Error::InvalidConfig("adagrad_epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &crate::config::KvFile) -> Result<Self> {
        let d = TrainConfig::default();
        let Some(s) = kv.section("train") else {
            return Ok(d);
        };
        let cfg = TrainConfig {
            k_steps: s.usize_or("K", d.k_steps)?,
            batch_samples: s.usize_or("M", d.batch_samples)?,
            batches_per_epoch: s.usize_or("N", d.batches_per_epoch)?,
            epochs: s.usize_or("epochs", d.epochs)?,
            learning_rate: s.f64_or("learning_rate", d.learning_rate)?,
            adagrad_epsilon: s.f64_or("adagrad_epsilon", d.adagrad_epsilon)?,
            gradient_clip_norm: match s.f64_or("gradient_clip_norm", 5.0)? {
                x if x <= 0.0 => None,
                x => Some(x),
            },
            split_seed: s.u64_or("split_seed", d.split_seed)?,
            validation_fraction: s.f64_or("validation_fraction", d.validation_fraction)?,
            hidden: s.usize_or("hidden", d.hidden)?,
            decoder_hidden: match s.get("decoder_hidden") {
                Some(_) => s.f64_list("decoder_hidden")?.iter().map(|&x| x as usize).collect(),
                None => d.decoder_hidden,
            },
            deploy_eval_steps: s.usize_or("deploy_eval_steps", d.deploy_eval_steps)?,
            deploy_eval_trials: s.usize_or("deploy_eval_trials", d.deploy_eval_trials)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Gradient with the same tensor layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub w_x: Mat,
    pub w_h: Mat,
    pub b: Vec<f64>,
    pub layers: Vec<(Mat, Vec<f64>)>,
}

impl ModelGrad {
    pub fn zeros_like(params: &DeepModelParams) -> Self {
        ModelGrad {
            w_x: Mat::zeros(params.lstm.w_x.rows, params.lstm.w_x.cols),
            w_h: Mat::zeros(params.lstm.w_h.rows, params.lstm.w_h.cols),
            b: vec![0.0; params.lstm.b.len()],
            layers: params
                .decoder
                .iter()
                .map(|l| (Mat::zeros(l.w.rows, l.w.cols), vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &ModelGrad) {
        for (a, b) in self.w_x.data.iter_mut().zip(&other.w_x.data) {
            *a += b;
        }
        for (a, b) in self.w_h.data.iter_mut().zip(&other.w_h.data) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
        for ((wa, ba), (wb, bb)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in wa.data.iter_mut().zip(&wb.data) {
                *a += b;
            }
            for (a, b) in ba.iter_mut().zip(bb) {
                *a += b;
            }
        }
    }

    /// Same canonical order as `DeepModelParams::flat`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.w_x.data);
        out.extend_from_slice(&self.w_h.data);
        out.extend_from_slice(&self.b);
        for (w, b) in &self.layers {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }
}

/// A teacher-forced training slice: episode index plus start offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slice {
    pub episode: usize,
    pub k0: usize,
}

/// Sum of squared prediction errors over all channels, per the K-step
/// objective. `preds[j]` is the prediction of step k0+j+1.
pub fn sse_loss(preds: &[[f64; 3]], targets: &[[f64; 3]]) -> f64 {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
        .sum()
}

fn slice_targets(ep: &Episode, k0: usize, k_steps: usize) -> Vec<[f64; 3]> {
    (1..=k_steps).map(|j| ep.y_at(k0 + j)).collect()
}

/// Training-form loss over a batch of M slices (sum over m, k).
pub fn loss_kstep(
    params: &DeepModelParams,
    dataset: &[Episode],
    batch: &[Slice],
    k_steps: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let ep = &dataset[s.episode];
        let preds = crate::model::forward_training(params, ep, s.k0, k_steps)?;
        total += sse_loss(&preds, &slice_targets(ep, s.k0, k_steps));
    }
    Ok(total)
}

/// Exact gradient of the K-step loss for one slice, via reverse
/// accumulation through the unrolled graph. Ground-truth inputs carry no
/// gradient; the kinematic-constraint path and the fuel clamp do.
fn backprop_slice(
    params: &DeepModelParams,
    ep: &Episode,
    k0: usize,
    k_steps: usize,
) -> Result<(f64, ModelGrad)> {
    let io = &params.io;
    let h = params.hidden;
    let dt = io.dt;
    let (scale_a, scale_f) = {
        let base = io.u_dim + io.w_dim;
        (io.norm[base].1, io.norm[base + 2].1)
    };

    // Forward with traces.
    let mut x = HiddenState::zeros(h);
    let mut lstm_traces = Vec::with_capacity(k_steps);
    let mut dec_traces = Vec::with_capacity(k_steps);
    let mut preds = Vec::with_capacity(k_steps);
    for j in 0..k_steps {
        let k = k0 + j;
        let y_k = ep.y_at(k);
        let (next, lt) = lstm_step_traced(&x, &ep.u_at(k), &ep.w_at(k), &y_k, params)?;
        let (y_hat, dtr) = decode_traced(&next, &y_k, params);
        lstm_traces.push(lt);
        dec_traces.push(dtr);
        preds.push(y_hat);
        x = next;
    }
    let targets = slice_targets(ep, k0, k_steps);
    let loss = sse_loss(&preds, &targets);

    // Reverse pass.
    let mut grad = ModelGrad::zeros_like(params);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let base = io.u_dim + io.w_dim;
    let f_offset = io.norm[base + 2].0;

    for j in (0..k_steps).rev().collect::<Vec<_>>() {
        let p = &preds[j];
        let t = &targets[j];
        let dtr = &dec_traces[j];

        // Loss head: a feeds both its own channel and the constrained v.
        let d_a = 2.0 * (p[0] - t[0]) + 2.0 * (p[1] - t[1]) * dt;
        let f_raw = dtr.out_norm[2] * scale_f + f_offset;
        let d_f = if f_raw > 0.0 { 2.0 * (p[2] - t[2]) } else { 0.0 };
        let mut delta = vec![d_a * scale_a, 0.0, d_f * scale_f];

        // Decoder backward (last layer is linear, hidden layers tanh).
        for (li, layer) in params.decoder.iter().enumerate().rev() {
            let input = &dtr.inputs[li];
            let layer_out: &[f64] = if li + 1 < params.decoder.len() {
                &dtr.inputs[li + 1]
            } else {
                &dtr.out_norm
            };
            if layer.activation == Activation::Tanh {
                for (d, &o) in delta.iter_mut().zip(layer_out) {
                    *d *= 1.0 - o * o;
                }
            }
            let (gw, gb) = &mut grad.layers[li];
            gw.add_outer(&delta, input);
            for (g, d) in gb.iter_mut().zip(&delta) {
                *g += d;
            }
            delta = layer.w.matvec_t(&delta);
        }

        // dL/dh(k+1): decoder contribution plus carry from the future.
        let mut dh: Vec<f64> = delta;
        for (d, c) in dh.iter_mut().zip(&dh_next) {
            *d += c;
        }

        // LSTM cell backward.
        let lt = &lstm_traces[j];
        let mut dp = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for n in 0..h {
            let do_ = dh[n] * lt.tanh_c[n];
            let dc = dc_next[n] + dh[n] * lt.o[n] * (1.0 - lt.tanh_c[n] * lt.tanh_c[n]);
            let di = dc * lt.g[n];
            let dg = dc * lt.i[n];
            let df = dc * lt.c_prev[n];
            dc_prev[n] = dc * lt.f[n];
            dp[n] = di * lt.i[n] * (1.0 - lt.i[n]);
            dp[h + n] = df * lt.f[n] * (1.0 - lt.f[n]);
            dp[2 * h + n] = dg * (1.0 - lt.g[n] * lt.g[n]);
            dp[3 * h + n] = do_ * lt.o[n] * (1.0 - lt.o[n]);
        }
        grad.w_x.add_outer(&dp, &lt.z);
        grad.w_h.add_outer(&dp, &lt.h_prev);
        for (g, d) in grad.b.iter_mut().zip(&dp) {
            *g += d;
        }
        dh_next = params.lstm.w_h.matvec_t(&dp);
        dc_next = dc_prev;
    }

    Ok((loss, grad))
}

/// Batch gradient: sum of per-slice gradients, accumulated in fixed batch
/// order so parallel and sequential evaluation agree bit-for-bit.
pub fn backprop_kstep(
    params: &DeepModelParams,
    dataset: &[Episode],
    batch: &[Slice],
    k_steps: usize,
) -> Result<(f64, ModelGrad)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let results = map_ordered(batch, |s| backprop_slice(params, &dataset[s.episode], s.k0, k_steps));
    let mut total_loss = 0.0;
    let mut grad = ModelGrad::zeros_like(params);
    for r in results {
        let (loss, g) = r?;
        total_loss += loss;
        grad.add(&g);
    }
    Ok((total_loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub acc: Vec<f64>,
}

impl AdagradState {
    pub fn new(n: usize) -> Self {
        AdagradState { acc: vec![0.0; n] }
    }
}

/// Adagrad step: accumulate squared gradients, move parameters by
/// -lr * g / sqrt(acc + eps). The optional global-norm clip applies to the
/// gradient before accumulation. On a non-finite gradient nothing changes.
pub fn adagrad_update(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdagradState,
    learning_rate: f64,
    epsilon: f64,
    clip_norm: Option<f64>,
) -> Result<()> {
    if params.len() != grad.len() || state.acc.len() != grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {} / grad {} / acc {}",
            params.len(),
            grad.len(),
            state.acc.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidInput("non-finite gradient".into()));
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = match clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for ((p, &g), acc) in params.iter_mut().zip(grad).zip(state.acc.iter_mut()) {
        let g = g * scale;
        *acc += g * g;
        *p -= learning_rate * g / (*acc + epsilon).sqrt();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-(m,k) training-form loss on the held-out set.
    pub train_form_loss: f64,
    /// Mean per-(m,k) deployment-form loss on held-out rollouts.
    pub deploy_form_loss: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    /// Best-validation checkpoint (by deployment-form loss).
    pub params: DeepModelParams,
    pub final_params: DeepModelParams,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn valid_slices(dataset: &[Episode], window: usize) -> Vec<(usize, usize)> {
    // (episode index, number of valid k0 positions)
    dataset
        .iter()
        .enumerate()
        .filter_map(|(i, ep)| {
            let len = ep.len();
            (len > window).then(|| (i, len - window))
        })
        .collect()
}

fn sample_slice(valid: &[(usize, usize)], total: usize, rng: &mut ChaCha8Rng) -> Slice {
    let mut pick = rng.gen_range(0..total);
    for &(ep, count) in valid {
        if pick < count {
            return Slice { episode: ep, k0: pick };
        }
        pick -= count;
    }
    unreachable!("pick within total");
}

/// Fixed held-out evaluation material: training-form slices and
/// deployment-form rollout windows.
struct EvalSet {
    train_slices: Vec<Slice>,
    deploy_windows: Vec<Slice>,
}

fn build_eval_set(
    val_idx: &[usize],
    dataset: &[Episode],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EvalSet> {
    let val_set: Vec<(usize, usize)> = valid_slices(dataset, cfg.k_steps + 1)
        .into_iter()
        .filter(|(i, _)| val_idx.contains(i))
        .collect();
    let total: usize = val_set.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Err(Error::InvalidInput("validation split has no usable slices".into()));
    }
    let train_slices: Vec<Slice> = (0..64).map(|_| sample_slice(&val_set, total, rng)).collect();

    let deploy_set: Vec<(usize, usize)> = valid_slices(dataset, cfg.deploy_eval_steps + 1)
        .into_iter()
        .filter(|(i, _)| val_idx.contains(i))
        .collect();
    let dtotal: usize = deploy_set.iter().map(|(_, c)| c).sum();
    if dtotal == 0 {
        return Err(Error::InvalidInput(format!(
            "validation split has no episode longer than {} steps",
            cfg.deploy_eval_steps
        )));
    }
    let deploy_windows: Vec<Slice> = (0..cfg.deploy_eval_trials)
        .map(|_| sample_slice(&deploy_set, dtotal, rng))
        .collect();
    Ok(EvalSet {
        train_slices,
        deploy_windows,
    })
}

/// Deployment-form rollout error over a held-out window, starting from the
/// ground-truth response at k0 with zero hidden state.
pub fn deploy_window_loss(
    params: &DeepModelParams,
    ep: &Episode,
    k0: usize,
    steps: usize,
) -> Result<f64> {
    let u: Vec<[f64; 2]> = (0..steps).map(|j| ep.u_at(k0 + j)).collect();
    let w: Vec<f64> = if params.io.w_dim == 1 {
        (0..steps).map(|j| ep.grade.as_ref().unwrap()[k0 + j]).collect()
    } else {
        Vec::new()
    };
    let out = forward_deployment(params, &u, &w, ep.y_at(k0), steps)?;
    let mut sum = 0.0;
    for j in 1..=steps {
        let t = ep.y_at(k0 + j);
        sum += (0..3).map(|c| (out[j][c] - t[c]).powi(2)).sum::<f64>();
    }
    Ok(sum / steps as f64)
}

fn evaluate(
    params: &DeepModelParams,
    dataset: &[Episode],
    eval: &EvalSet,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let train_sum = loss_kstep(params, dataset, &eval.train_slices, cfg.k_steps)?;
    let train_loss = train_sum / (eval.train_slices.len() * cfg.k_steps) as f64;
    let per_window = map_ordered(&eval.deploy_windows, |s| {
        deploy_window_loss(params, &dataset[s.episode], s.k0, cfg.deploy_eval_steps)
    });
    let mut deploy_sum = 0.0;
    for r in per_window {
        deploy_sum += r?;
    }
    let deploy_loss = deploy_sum / eval.deploy_windows.len() as f64;
    Ok((train_loss, deploy_loss))
}

/// Full training loop. The dataset is split into train/validation by the
/// config's split seed; slices are drawn uniformly with replacement from
/// the training split; learning curves are recorded per epoch including an
/// epoch-0 entry before any update.
pub fn train(
    mut params: DeepModelParams,
    dataset: &[Episode],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }

    // Deterministic shuffled train/validation split.
    let mut split_rng = crate::util::stream_rng(cfg.split_seed, u64::MAX);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, split_rng.gen_range(0..=i));
    }
    let n_val = ((dataset.len() as f64 * cfg.validation_fraction).round() as usize)
        .clamp(1, dataset.len().saturating_sub(1).max(1));
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_idx: Vec<usize> = order[n_val..].to_vec();

    let eval = build_eval_set(&val_idx, dataset, cfg, &mut split_rng)?;

    let train_set: Vec<(usize, usize)> = valid_slices(dataset, cfg.k_steps + 1)
        .into_iter()
        .filter(|(i, _)| train_idx.contains(i))
        .collect();
    let total: usize = train_set.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Err(Error::InvalidInput("training split has no usable slices".into()));
    }

    let mut opt = AdagradState::new(params.param_count());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let (t0, d0) = evaluate(&params, dataset, &eval, cfg)?;
    curve.push(EpochRecord {
        epoch: 0,
        train_form_loss: t0,
        deploy_form_loss: d0,
    });
    let mut best = (0usize, d0, params.clone());

    for epoch in 1..=cfg.epochs {
        for _ in 0..cfg.batches_per_epoch {
            let batch: Vec<Slice> = (0..cfg.batch_samples)
                .map(|_| sample_slice(&train_set, total, rng))
                .collect();
            let (loss, grad) = backprop_kstep(&params, dataset, &batch, cfg.k_steps)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let mut flat = params.flat();
            adagrad_update(
                &mut flat,
                &grad.flat(),
                &mut opt,
                cfg.learning_rate,
                cfg.adagrad_epsilon,
                cfg.gradient_clip_norm,
            )?;
            params.set_flat(&flat);
        }
        let (tl, dl) = evaluate(&params, dataset, &eval, cfg)?;
        if !tl.is_finite() || !dl.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        curve.push(EpochRecord {
            epoch,
            train_form_loss: tl,
            deploy_form_loss: dl,
        });
        if dl < best.1 {
            best = (epoch, dl, params.clone());
        }
    }

    Ok(TrainResult {
        params: best.2,
        final_params: params,
        curve,
        best_epoch: best.0,
    })
}

/// Write the learning curve as CSV (epoch, train_form_loss, deploy_form_loss).
pub fn write_curve(curve: &[EpochRecord], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("epoch,train_form_loss,deploy_form_loss\n");
    for r in curve {
        out.push_str(&format!(
            "{},{:.16e},{:.16e}\n",
            r.epoch, r.train_form_loss, r.deploy_form_loss
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
