//! Forward and backward passes of every layer type.
//!
//! Shapes follow [`Tensor3`]: batch x time x channels. Dense layers see each
//! sample as one flat vector and emit a time axis of length 1.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Whether a layer runs with batch statistics and dropout, or in inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// How a convolution shares weights across input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConvKind {
    /// Filters of shape `f x D_in`, one per unit.
    Full,
    /// One `f`-tap filter per unit shared by every input channel; the
    /// per-channel responses are summed into the unit.
    Temporal,
}

/// Weights stored tap-major: `w[j][d][u]` (full) or `w[j][u]` (temporal).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub filter: usize,
    pub in_channels: usize,
    pub units: usize,
    pub kind: ConvKind,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(filter: usize, in_channels: usize, units: usize, kind: ConvKind) -> Self {
        let mut p = Self {
            filter,
            in_channels,
            units,
            kind,
            weights: Vec::new(),
            bias: vec![0.0; units],
        };
        p.weights = vec![0.0; p.filter * p.taps() * units];
        p
    }

    /// Channels read per filter tap.
    fn taps(&self) -> usize {
        match self.kind {
            ConvKind::Full => self.in_channels,
            ConvKind::Temporal => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Channel-summed view for temporal convolutions, the input itself otherwise.
fn conv_source(input: &Tensor3, kind: ConvKind) -> std::borrow::Cow<'_, [f64]> {
    match kind {
        ConvKind::Full => input.data().into(),
        ConvKind::Temporal => input
            .data()
            .chunks_exact(input.channels())
            .map(|row| row.iter().sum::<f64>())
            .collect::<Vec<_>>()
            .into(),
    }
}

/// `(n*t) x (f*c)` patch matrix with zero padding (`same`, stride 1).
fn im2col(src: &[f64], n: usize, t: usize, c: usize, f: usize) -> Vec<f64> {
    let half = f / 2;
    let row = f * c;
    let mut col = vec![0.0; n * t * row];
    for b in 0..n {
        let s = &src[b * t * c..(b + 1) * t * c];
        for tt in 0..t {
            let dst = &mut col[(b * t + tt) * row..(b * t + tt + 1) * row];
            for j in 0..f {
                let st = tt + j;
                if st < half || st - half >= t {
                    continue;
                }
                let st = st - half;
                dst[j * c..(j + 1) * c].copy_from_slice(&s[st * c..(st + 1) * c]);
            }
        }
    }
    col
}

fn col2im(col: &[f64], n: usize, t: usize, c: usize, f: usize) -> Vec<f64> {
    let half = f / 2;
    let row = f * c;
    let mut out = vec![0.0; n * t * c];
    for b in 0..n {
        let o = &mut out[b * t * c..(b + 1) * t * c];
        for tt in 0..t {
            let src = &col[(b * t + tt) * row..(b * t + tt + 1) * row];
            for j in 0..f {
                let st = tt + j;
                if st < half || st - half >= t {
                    continue;
                }
                let st = st - half;
                for (acc, g) in o[st * c..(st + 1) * c].iter_mut().zip(&src[j * c..(j + 1) * c]) {
                    *acc += g;
                }
            }
        }
    }
    out
}

/// `out[b][t][u] = bias[u] + sum_{j,d} w[j][d][u] * in[b][t + j - f/2][d]`,
/// zero outside the series.
pub fn conv1d_forward(input: &Tensor3, params: &ConvParams) -> Result<Tensor3> {
    let (n, t, d) = input.dims();
    if d != params.in_channels {
        return Err(Error::Shape(format!(
            "convolution expects {} input channels, got {d}",
            params.in_channels
        )));
    }
    let c = params.taps();
    let src = conv_source(input, params.kind);
    let col = im2col(&src, n, t, c, params.filter);
    let units = params.units;
    let mut out = Tensor3::zeros(n, t, units);
    for row in out.data_mut().chunks_exact_mut(units) {
        row.copy_from_slice(&params.bias);
    }
    gemm(
        n * t,
        params.filter * c,
        units,
        &col,
        false,
        &params.weights,
        false,
        1.0,
        out.data_mut(),
    );
    Ok(out)
}

pub fn conv1d_backward(input: &Tensor3, params: &ConvParams, grad_out: &Tensor3) -> Result<(Tensor3, ConvGrads)> {
    let (n, t, d) = input.dims();
    if d != params.in_channels || grad_out.dims() != (n, t, params.units) {
        return Err(Error::Shape(format!(
            "convolution backward: input {:?}, grad {:?}, params {}->{}",
            input.dims(),
            grad_out.dims(),
            params.in_channels,
            params.units
        )));
    }
    let c = params.taps();
    let f = params.filter;
    let units = params.units;
    let src = conv_source(input, params.kind);
    let col = im2col(&src, n, t, c, f);
    let go = grad_out.data();

    let mut gw = vec![0.0; f * c * units];
    gemm(f * c, n * t, units, &col, true, go, false, 0.0, &mut gw);
    let mut gb = vec![0.0; units];
    for row in go.chunks_exact(units) {
        for (acc, g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut gcol = vec![0.0; n * t * f * c];
    gemm(n * t, units, f * c, go, false, &params.weights, true, 0.0, &mut gcol);
    let gsrc = col2im(&gcol, n, t, c, f);
    let grad_in = match params.kind {
        ConvKind::Full => Tensor3::from_vec(n, t, d, gsrc)?,
        ConvKind::Temporal => {
            let data = gsrc.iter().flat_map(|&g| std::iter::repeat_n(g, d)).collect();
            Tensor3::from_vec(n, t, d, data)?
        }
    };
    Ok((grad_in, ConvGrads { weights: gw, bias: gb }))
}

/// Fully connected layer, `weights` stored `inputs x units` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub inputs: usize,
    pub units: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(inputs: usize, units: usize) -> Self {
        Self {
            inputs,
            units,
            weights: vec![0.0; inputs * units],
            bias: vec![0.0; units],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// `out = in · W + b` per sample; the output has time length 1.
pub fn dense_forward(input: &Tensor3, params: &DenseParams) -> Result<Tensor3> {
    let n = input.batch();
    let features = input.time() * input.channels();
    if features != params.inputs {
        return Err(Error::Shape(format!(
            "dense layer expects {} inputs, got {features}",
            params.inputs
        )));
    }
    let mut out = Tensor3::zeros(n, 1, params.units);
    for row in out.data_mut().chunks_exact_mut(params.units) {
        row.copy_from_slice(&params.bias);
    }
    gemm(
        n,
        features,
        params.units,
        input.data(),
        false,
        &params.weights,
        false,
        1.0,
        out.data_mut(),
    );
    Ok(out)
}

pub fn dense_backward(input: &Tensor3, params: &DenseParams, grad_out: &Tensor3) -> Result<(Tensor3, DenseGrads)> {
    let (n, t, d) = input.dims();
    if t * d != params.inputs || grad_out.dims() != (n, 1, params.units) {
        return Err(Error::Shape(format!(
            "dense backward: input {:?}, grad {:?}",
            input.dims(),
            grad_out.dims()
        )));
    }
    let (fin, units) = (params.inputs, params.units);
    let go = grad_out.data();
    let mut gw = vec![0.0; fin * units];
    gemm(fin, n, units, input.data(), true, go, false, 0.0, &mut gw);
    let mut gb = vec![0.0; units];
    for row in go.chunks_exact(units) {
        for (acc, g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut gi = Tensor3::zeros(n, t, d);
    gemm(n, units, fin, go, false, &params.weights, true, 0.0, gi.data_mut());
    Ok((gi, DenseGrads { weights: gw, bias: gb }))
}

pub fn relu_forward(input: &Tensor3) -> Tensor3 {
    let (n, t, d) = input.dims();
    let data = input.data().iter().map(|&z| z.max(0.0)).collect();
    Tensor3::from_vec(n, t, d, data).expect("same shape")
}

/// Gradient through ReLU; the subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    let (n, t, d) = input.dims();
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();
    Tensor3::from_vec(n, t, d, data).expect("same shape")
}

/// Per-channel normalization over the batch and time axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    /// Number of training batches folded into the running statistics.
    pub updates: u64,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Saved by a training-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub fn batchnorm_forward(
    input: &Tensor3,
    state: &mut BatchNormState,
    phase: Phase,
) -> Result<(Tensor3, Option<BatchNormCache>)> {
    let (n, t, d) = input.dims();
    if d != state.channels() {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, input has {d}",
            state.channels()
        )));
    }
    let x = input.data();
    let (mean, var) = match phase {
        Phase::Infer => {
            if state.updates == 0 {
                return Err(Error::InvalidInput(
                    "batch norm used for inference before any training step".into(),
                ));
            }
            (state.running_mean.clone(), state.running_var.clone())
        }
        Phase::Train => {
            let m = (n * t) as f64;
            let mut mean = vec![0.0; d];
            for row in x.chunks_exact(d) {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            let mut var = vec![0.0; d];
            for row in x.chunks_exact(d) {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mo = state.momentum;
            for c in 0..d {
                state.running_mean[c] = mo * state.running_mean[c] + (1.0 - mo) * mean[c];
                state.running_var[c] = mo * state.running_var[c] + (1.0 - mo) * var[c] * unbias;
            }
            state.updates += 1;
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        for c in 0..d {
            let h = (row[c] - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(state.gamma[c] * h + state.beta[c]);
        }
    }
    let cache = (phase == Phase::Train).then_some(BatchNormCache { xhat, inv_std });
    Ok((Tensor3::from_vec(n, t, d, out)?, cache))
}

/// Inference-mode normalization by the running statistics.
pub fn batchnorm_infer(input: &Tensor3, state: &BatchNormState) -> Result<Tensor3> {
    let mut scratch = state.clone();
    batchnorm_forward(input, &mut scratch, Phase::Infer).map(|(out, _)| out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    grad_out: &Tensor3,
    state: &BatchNormState,
    cache: &BatchNormCache,
) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let (n, t, d) = grad_out.dims();
    let m = (n * t) as f64;
    let g = grad_out.data();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for (grow, hrow) in g.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
        for c in 0..d {
            dgamma[c] += grow[c] * hrow[c];
            dbeta[c] += grow[c];
        }
    }
    // dxhat = g * gamma; sum(dxhat) = gamma * dbeta; sum(dxhat * xhat) = gamma * dgamma
    let mut gi = Vec::with_capacity(g.len());
    for (grow, hrow) in g.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
        for c in 0..d {
            let gamma = state.gamma[c];
            let v = gamma * cache.inv_std[c] / m * (m * grow[c] - dbeta[c] - hrow[c] * dgamma[c]);
            gi.push(v);
        }
    }
    (Tensor3::from_vec(n, t, d, gi).expect("same shape"), dgamma, dbeta)
}

/// Inverted dropout. In training each activation is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; inference is identity.
/// Returns the output and, in training, the per-element scale mask.
pub fn dropout_forward(input: &Tensor3, rate: f64, phase: Phase, rng: &mut Rng) -> Result<(Tensor3, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!("dropout rate {rate} not in [0, 1)")));
    }
    if phase == Phase::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let (n, t, d) = input.dims();
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((Tensor3::from_vec(n, t, d, data)?, Some(mask)))
}

pub fn dropout_backward(grad_out: &Tensor3, mask: Option<&[f64]>) -> Tensor3 {
    match mask {
        None => grad_out.clone(),
        Some(mask) => {
            let (n, t, d) = grad_out.dims();
            let data = grad_out.data().iter().zip(mask).map(|(g, m)| g * m).collect();
            Tensor3::from_vec(n, t, d, data).expect("same shape")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Non-overlapping windows of width `k` along time; a trailing partial window
/// is dropped. For max pooling the cache holds the winning input time index
/// of every output element (first maximum on ties).
pub fn pool_forward(input: &Tensor3, kind: PoolKind, k: usize) -> Result<(Tensor3, Vec<usize>)> {
    let (n, t, d) = input.dims();
    if k == 0 || t / k == 0 {
        return Err(Error::Shape(format!("cannot pool {t} steps with window {k}")));
    }
    let to = t / k;
    let mut out = Tensor3::zeros(n, to, d);
    let mut arg = Vec::new();
    if kind == PoolKind::Max {
        arg = vec![0; n * to * d];
    }
    for b in 0..n {
        for o in 0..to {
            for c in 0..d {
                let win = (o * k..o * k + k).map(|s| (s, input.at(b, s, c)));
                let v = match kind {
                    PoolKind::Avg => win.map(|(_, v)| v).sum::<f64>() / k as f64,
                    PoolKind::Max => {
                        let (best, v) = win.fold(
                            (o * k, f64::NEG_INFINITY),
                            |acc, (s, v)| {
                                if v > acc.1 {
                                    (s, v)
                                } else {
                                    acc
                                }
                            },
                        );
                        arg[(b * to + o) * d + c] = best;
                        v
                    }
                };
                *out.at_mut(b, o, c) = v;
            }
        }
    }
    Ok((out, arg))
}

pub fn pool_backward(grad_out: &Tensor3, kind: PoolKind, k: usize, input_time: usize, argmax: &[usize]) -> Tensor3 {
    let (n, to, d) = grad_out.dims();
    let mut gi = Tensor3::zeros(n, input_time, d);
    for b in 0..n {
        for o in 0..to {
            for c in 0..d {
                let g = grad_out.at(b, o, c);
                match kind {
                    PoolKind::Avg => {
                        for s in o * k..o * k + k {
                            *gi.at_mut(b, s, c) += g / k as f64;
                        }
                    }
                    PoolKind::Max => *gi.at_mut(b, argmax[(b * to + o) * d + c], c) += g,
                }
            }
        }
    }
    gi
}

/// Per-channel mean over time.
pub fn global_avg_pool(input: &Tensor3) -> Tensor3 {
    let (n, t, d) = input.dims();
    let mut out = Tensor3::zeros(n, 1, d);
    for b in 0..n {
        for s in 0..t {
            for c in 0..d {
                *out.at_mut(b, 0, c) += input.at(b, s, c) / t as f64;
            }
        }
    }
    out
}

pub fn global_avg_pool_backward(grad_out: &Tensor3, input_time: usize) -> Tensor3 {
    let (n, _, d) = grad_out.dims();
    let mut gi = Tensor3::zeros(n, input_time, d);
    for b in 0..n {
        for s in 0..input_time {
            for c in 0..d {
                *gi.at_mut(b, s, c) = grad_out.at(b, 0, c) / input_time as f64;
            }
        }
    }
    gi
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Returns `(-ln p(label), p, p - onehot(label))`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = lse - logits[label];
    let probs = softmax(logits);
    let mut grad = probs.clone();
    grad[label] -= 1.0;
    (loss, probs, grad)
}

/// Mean cross-entropy over a batch of logits `(n, 1, C)` and the gradient of
/// that mean with respect to the logits.
pub fn batch_cross_entropy(logits: &Tensor3, labels: &[usize]) -> Result<(f64, Tensor3)> {
    let (n, t, c) = logits.dims();
    if t != 1 || labels.len() != n {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.dims(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidInput(format!("label {y} out of range for {c} classes")));
        }
        let (loss, _, g) = softmax_cross_entropy(logits.sample(b), y);
        total += loss;
        grad.extend(g.into_iter().map(|v| v / n as f64));
    }
    Ok((total / n as f64, Tensor3::from_vec(n, 1, c, grad)?))
}
