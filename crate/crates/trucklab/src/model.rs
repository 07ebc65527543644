//! The recurrent truck replica: an LSTM state model feeding a fully
//! connected decoder whose speed channel is overridden by the discrete-time
//! longitudinal kinematics constraint v(k+1) = v(k) + a(k+1) * dt.
//! Evaluable teacher-forced (training form) and closed-loop (deployment
//! form).

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Mat};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_DECODER_HIDDEN: &[usize] = &[64, 64];

/// Channel bookkeeping and per-channel affine normalization
/// (normalized = (raw - offset) / scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoSpec {
    pub u_dim: usize,
    pub w_dim: usize,
    pub y_dim: usize,
    pub names: Vec<String>,
    pub units: Vec<String>,
    pub dt: f64,
    /// (offset, scale) per channel, ordered u then w then y.
    pub norm: Vec<(f64, f64)>,
}

impl IoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.y_dim != 3 {
            return Err(Error::InvalidConfig(format!(
                "y channel order is (a, v, f_rate); y_dim must be 3, got {}",
                self.y_dim
            )));
        }
        let total = self.u_dim + self.w_dim + self.y_dim;
        if self.norm.len() != total {
            return Err(Error::InvalidConfig(format!(
                "norm has {} entries, expected {total}",
                self.norm.len()
            )));
        }
        if self.norm.iter().any(|(_, s)| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("normalization scales must be > 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be > 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.u_dim + self.w_dim + self.y_dim
    }

    fn norm_at(&self, idx: usize, raw: f64) -> f64 {
        let (o, s) = self.norm[idx];
        (raw - o) / s
    }

    fn denorm_y(&self, channel: usize, normed: f64) -> f64 {
        let (o, s) = self.norm[self.u_dim + self.w_dim + channel];
        normed * s + o
    }

    /// Normalized network input [u; w; y].
    pub fn normalize_input(&self, u: &[f64], w: &[f64], y: &[f64; 3]) -> Result<Vec<f64>> {
        if u.len() != self.u_dim || w.len() != self.w_dim {
            return Err(Error::ShapeMismatch(format!(
                "input dims ({}, {}) vs spec ({}, {})",
                u.len(),
                w.len(),
                self.u_dim,
                self.w_dim
            )));
        }
        let mut z = Vec::with_capacity(self.input_dim());
        for (i, &x) in u.iter().enumerate() {
            z.push(self.norm_at(i, x));
        }
        for (i, &x) in w.iter().enumerate() {
            z.push(self.norm_at(self.u_dim + i, x));
        }
        for (i, &x) in y.iter().enumerate() {
            z.push(self.norm_at(self.u_dim + self.w_dim + i, x));
        }
        Ok(z)
    }

    /// Per-channel mean/std statistics over a training set. Channels with
    /// (near) zero variance get unit scale.
    pub fn from_episodes(episodes: &[Episode], dt: f64) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
        let w_dim = if first.has_grade() { 1 } else { 0 };
        let u_dim = 2;
        let y_dim = 3;
        let total = u_dim + w_dim + y_dim;
        let mut sum = vec![0.0; total];
        let mut sum_sq = vec![0.0; total];
        let mut count = 0usize;
        for ep in episodes {
            if ep.has_grade() != first.has_grade() {
                return Err(Error::InvalidInput(
                    "mixed flat and graded episodes in one dataset".into(),
                ));
            }
            for k in 0..ep.len() {
                let mut idx = 0;
                let mut push = |x: f64| {
                    sum[idx] += x;
                    sum_sq[idx] += x * x;
                    idx += 1;
                };
                push(ep.e_cmd[k]);
                push(ep.b_cmd[k]);
                if let Some(g) = &ep.grade {
                    push(g[k]);
                }
                push(ep.a[k]);
                push(ep.v[k]);
                push(ep.f_rate[k]);
                count += 1;
            }
        }
        let n = count as f64;
        let norm: Vec<(f64, f64)> = (0..total)
            .map(|i| {
                let mean = sum[i] / n;
                let var = (sum_sq[i] / n - mean * mean).max(0.0);
                let std = var.sqrt();
                (mean, if std > 1e-9 { std } else { 1.0 })
            })
            .collect();
        let mut names = vec!["E_cmd".into(), "B_cmd".into()];
        let mut units = vec!["%".into(), "%".into()];
        if w_dim == 1 {
            names.push("theta_rdg".into());
            units.push("%".into());
        }
        names.extend(["a".into(), "v".into(), "f_rate".into()]);
        units.extend(["m/s^2".into(), "m/s".into(), "cm^3/s".into()]);
        let spec = IoSpec {
            u_dim,
            w_dim,
            y_dim,
            names,
            units,
            dt,
            norm,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Gate order along rows: input, forget, candidate, output (4h rows).
    pub w_x: Mat,
    pub w_h: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Mat,
    pub b: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepModelParams {
    pub lstm: LstmParams,
    pub decoder: Vec<DenseLayer>,
    pub io: IoSpec,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(h: usize) -> Self {
        HiddenState {
            cell: vec![0.0; h],
            hidden: vec![0.0; h],
        }
    }
}

/// Activations recorded during one LSTM step, consumed by backprop.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub z: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Layer inputs plus raw head output recorded during decode.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    /// inputs[0] is the hidden vector; inputs[i] feeds decoder layer i.
    pub inputs: Vec<Vec<f64>>,
    pub out_norm: Vec<f64>,
}

impl DeepModelParams {
    pub fn zeros(io: IoSpec, hidden: usize, decoder_hidden: &[usize]) -> Result<Self> {
        io.validate()?;
        let d_in = io.input_dim();
        let mut decoder = Vec::new();
        let mut prev = hidden;
        for &width in decoder_hidden {
            decoder.push(DenseLayer {
                w: Mat::zeros(width, prev),
                b: vec![0.0; width],
                activation: Activation::Tanh,
            });
            prev = width;
        }
        decoder.push(DenseLayer {
            w: Mat::zeros(io.y_dim, prev),
            b: vec![0.0; io.y_dim],
            activation: Activation::Linear,
        });
        Ok(DeepModelParams {
            lstm: LstmParams {
                w_x: Mat::zeros(4 * hidden, d_in),
                w_h: Mat::zeros(4 * hidden, hidden),
                b: vec![0.0; 4 * hidden],
            },
            decoder,
            io,
            hidden,
        })
    }

    /// Random init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per matrix,
    /// forget-gate bias +1.
    pub fn init<R: rand::Rng>(
        io: IoSpec,
        hidden: usize,
        decoder_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(io, hidden, decoder_hidden)?;
        let d_in = p.io.input_dim();
        p.lstm.w_x = Mat::init_uniform(4 * hidden, d_in, rng);
        p.lstm.w_h = Mat::init_uniform(4 * hidden, hidden, rng);
        for b in p.lstm.b[hidden..2 * hidden].iter_mut() {
            *b = 1.0;
        }
        for layer in p.decoder.iter_mut() {
            let (rows, cols) = (layer.w.rows, layer.w.cols);
            layer.w = Mat::init_uniform(rows, cols, rng);
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let d_in = self.io.input_dim();
        4 * h * (h + d_in)
            + 4 * h
            + self
                .decoder
                .iter()
                .map(|l| l.w.len() + l.b.len())
                .sum::<usize>()
    }

    /// Canonical flat layout: lstm.w_x, lstm.w_h, lstm.b, then each decoder
    /// layer's w and b. Shared by the optimizer and the gradient check.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.lstm.w_x.data);
        out.extend_from_slice(&self.lstm.w_h.data);
        out.extend_from_slice(&self.lstm.b);
        for l in &self.decoder {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        take(&mut self.lstm.w_x.data);
        take(&mut self.lstm.w_h.data);
        take(&mut self.lstm.b);
        for l in &mut self.decoder {
            take(&mut l.w.data);
            take(&mut l.b);
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.flat().iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("non-finite model parameters".into()))
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("deep_model");
        ck.push(
            "lstm.w_x",
            vec![self.lstm.w_x.rows, self.lstm.w_x.cols],
            self.lstm.w_x.data.clone(),
        );
        ck.push(
            "lstm.w_h",
            vec![self.lstm.w_h.rows, self.lstm.w_h.cols],
            self.lstm.w_h.data.clone(),
        );
        ck.push("lstm.b", vec![self.lstm.b.len()], self.lstm.b.clone());
        for (i, l) in self.decoder.iter().enumerate() {
            ck.push(&format!("decoder.{i}.w"), vec![l.w.rows, l.w.cols], l.w.data.clone());
            ck.push(&format!("decoder.{i}.b"), vec![l.b.len()], l.b.clone());
        }
        ck.set_extra("io_spec", &self.io);
        ck.set_extra("hidden", &self.hidden);
        let acts: Vec<Activation> = self.decoder.iter().map(|l| l.activation).collect();
        ck.set_extra("decoder_activations", &acts);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "deep_model" {
            return Err(Error::Checkpoint(format!(
                "expected deep_model checkpoint, found `{}`",
                ck.kind
            )));
        }
        let io: IoSpec = ck.extra_json("io_spec")?;
        let hidden: usize = ck.extra_json("hidden")?;
        let acts: Vec<Activation> = ck.extra_json("decoder_activations")?;
        let mat = |name: &str| -> Result<Mat> {
            let (meta, data) = ck.get(name)?;
            if meta.shape.len() != 2 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not 2-D")));
            }
            Ok(Mat {
                rows: meta.shape[0],
                cols: meta.shape[1],
                data: data.clone(),
            })
        };
        let mut decoder = Vec::new();
        for (i, act) in acts.iter().enumerate() {
            decoder.push(DenseLayer {
                w: mat(&format!("decoder.{i}.w"))?,
                b: ck.get(&format!("decoder.{i}.b"))?.1.clone(),
                activation: *act,
            });
        }
        let params = DeepModelParams {
            lstm: LstmParams {
                w_x: mat("lstm.w_x")?,
                w_h: mat("lstm.w_h")?,
                b: ck.get("lstm.b")?.1.clone(),
            },
            decoder,
            io,
            hidden,
        };
        params.io.validate()?;
        params.assert_finite()?;
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One LSTM update over the normalized concatenated input.
pub fn lstm_step(
    x: &HiddenState,
    u: &[f64],
    w: &[f64],
    y_in: &[f64; 3],
    params: &DeepModelParams,
) -> Result<HiddenState> {
    Ok(lstm_step_traced(x, u, w, y_in, params)?.0)
}

pub fn lstm_step_traced(
    x: &HiddenState,
    u: &[f64],
    w: &[f64],
    y_in: &[f64; 3],
    params: &DeepModelParams,
) -> Result<(HiddenState, LstmTrace)> {
    for &v in u.iter().chain(w.iter()).chain(y_in.iter()) {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite model input {v}")));
        }
    }
    let z = params.io.normalize_input(u, w, y_in)?;
    let h = params.hidden;
    let mut pre = params.lstm.b.clone();
    params.lstm.w_x.matvec_acc(&z, &mut pre);
    params.lstm.w_h.matvec_acc(&x.hidden, &mut pre);

    let mut gi = vec![0.0; h];
    let mut gf = vec![0.0; h];
    let mut gg = vec![0.0; h];
    let mut go = vec![0.0; h];
    let mut c = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    let mut hidden = vec![0.0; h];
    for j in 0..h {
        gi[j] = sigmoid(pre[j]);
        gf[j] = sigmoid(pre[h + j]);
        gg[j] = pre[2 * h + j].tanh();
        go[j] = sigmoid(pre[3 * h + j]);
        c[j] = gf[j] * x.cell[j] + gi[j] * gg[j];
        tanh_c[j] = c[j].tanh();
        hidden[j] = go[j] * tanh_c[j];
    }
    let trace = LstmTrace {
        z,
        h_prev: x.hidden.clone(),
        c_prev: x.cell.clone(),
        i: gi,
        f: gf,
        g: gg,
        o: go,
        c: c.clone(),
        tanh_c,
    };
    Ok((HiddenState { cell: c, hidden }, trace))
}

/// Decode the hidden state into the response vector. The decoded speed
/// channel is replaced by the kinematic constraint from prev_y's speed; the
/// fuel-rate channel is clamped nonnegative.
pub fn decode(x: &HiddenState, prev_y: &[f64; 3], params: &DeepModelParams) -> [f64; 3] {
    decode_traced(x, prev_y, params).0
}

pub fn decode_traced(
    x: &HiddenState,
    prev_y: &[f64; 3],
    params: &DeepModelParams,
) -> ([f64; 3], DecodeTrace) {
    let mut inputs = Vec::with_capacity(params.decoder.len());
    let mut cur = x.hidden.clone();
    for layer in &params.decoder {
        inputs.push(cur.clone());
        let mut out = layer.b.clone();
        layer.w.matvec_acc(&cur, &mut out);
        if layer.activation == Activation::Tanh {
            for v in out.iter_mut() {
                *v = v.tanh();
            }
        }
        cur = out;
    }
    let out_norm = cur;
    let a = params.io.denorm_y(0, out_norm[0]);
    let f_rate = params.io.denorm_y(2, out_norm[2]).max(0.0);
    let v = prev_y[1] + a * params.io.dt;
    (
        [a, v, f_rate],
        DecodeTrace {
            inputs,
            out_norm,
        },
    )
}

/// Teacher-forced K-step evaluation: the state model consumes ground-truth
/// responses while the hidden state recurses. Returns predictions for steps
/// k0+1 ..= k0+K.
pub fn forward_training(
    params: &DeepModelParams,
    episode: &Episode,
    k0: usize,
    k_steps: usize,
) -> Result<Vec<[f64; 3]>> {
    if episode.len() < k0 + k_steps + 1 {
        return Err(Error::InvalidInput(format!(
            "slice out of range: episode len {}, need k0 {k0} + K {k_steps} + 1",
            episode.len()
        )));
    }
    let mut x = HiddenState::zeros(params.hidden);
    let mut out = Vec::with_capacity(k_steps);
    for j in 0..k_steps {
        let k = k0 + j;
        let y_k = episode.y_at(k);
        x = lstm_step(&x, &episode.u_at(k), &episode.w_at(k), &y_k, params)?;
        out.push(decode(&x, &y_k, params));
    }
    Ok(out)
}

/// Closed-loop rollout: predictions are fed back into the state model and
/// the kinematic constraint. Returns [y0, yhat(1), ..., yhat(N)].
pub fn forward_deployment(
    params: &DeepModelParams,
    u_series: &[[f64; 2]],
    w_series: &[f64],
    y0: [f64; 3],
    steps: usize,
) -> Result<Vec<[f64; 3]>> {
    if u_series.len() < steps {
        return Err(Error::InvalidInput(format!(
            "u series has {} entries, need {steps}",
            u_series.len()
        )));
    }
    if params.io.w_dim == 1 && w_series.len() < steps {
        return Err(Error::InvalidInput(format!(
            "w series has {} entries, need {steps}",
            w_series.len()
        )));
    }
    let mut x = HiddenState::zeros(params.hidden);
    let mut y = y0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(y0);
    for k in 0..steps {
        let w: &[f64] = if params.io.w_dim == 1 { &w_series[k..k + 1] } else { &[] };
        x = lstm_step(&x, &u_series[k], w, &y, params)?;
        y = decode(&x, &y, params);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k,
                context: "deployment-form rollout diverged".into(),
            });
        }
        out.push(y);
    }
    Ok(out)
}
