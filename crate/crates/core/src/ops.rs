//! Forward and backward kernels for the primitive operators.
//!
//! Every kernel is a pure function. Reductions run in a fixed loop order, so
//! results are bit-reproducible across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    /// Zero padding with output length ceil(len / stride). Odd totals put the
    /// extra row/column at the bottom/right.
    Same,
}

/// Output length and leading pad for one spatial axis, or `None` when the
/// window does not fit.
pub fn window_output(len: usize, window: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 || window == 0 {
        return None;
    }
    match padding {
        Padding::Valid => {
            if len < window {
                None
            } else {
                Some(((len - window) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let needed = (out - 1) * stride + window;
            let total = needed.saturating_sub(len);
            Some((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        let (out_h, pad_top) = window_output(h, kh, stride, padding)
            .ok_or_else(|| Error::shape(format!("window {kh}x{kw} stride {stride} does not fit input {h}x{w}")))?;
        let (out_w, pad_left) = window_output(w, kw, stride, padding)
            .ok_or_else(|| Error::shape(format!("window {kh}x{kw} stride {stride} does not fit input {h}x{w}")))?;
        Ok(Window { kh, kw, stride, pad_top, pad_left, out_h, out_w })
    }

    #[inline]
    fn source(&self, out: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = out * self.stride + k;
        if pos < pad || pos - pad >= len {
            None
        } else {
            Some(pos - pad)
        }
    }
}

fn nhwc(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(Error::shape(format!("{what} must be rank-4 NHWC, got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub win: Window,
}

pub fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<ConvGeometry> {
    let (n, h, w, cin) = nhwc(input, "conv2d input")?;
    let (kh, kw, kcin, cout) = match *kernel.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => return Err(Error::shape(format!("conv2d kernel must be rank-4, got {s:?}"))),
    };
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d kernel {:?} expects {kcin} input channels but input {:?} has {cin}",
            kernel.shape(),
            input.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let win = Window::new(h, w, kh, kw, stride, padding)?;
    Ok(ConvGeometry { n, h, w, cin, cout, win })
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    Ok(conv2d_with(input, kernel, &g))
}

pub(crate) fn conv2d_with(input: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let ConvGeometry { n, h, w, cin, cout, win } = *g;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * win.out_h * win.out_w * cout];
    for b in 0..n {
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o_base = ((b * win.out_h + oh) * win.out_w + ow) * cout;
                let o = &mut out[o_base..o_base + cout];
                for i in 0..win.kh {
                    let Some(ih) = win.source(oh, i, win.pad_top, h) else { continue };
                    for j in 0..win.kw {
                        let Some(iw) = win.source(ow, j, win.pad_left, w) else { continue };
                        let x_base = ((b * h + ih) * w + iw) * cin;
                        let xs = &x[x_base..x_base + cin];
                        let k_base = (i * win.kw + j) * cin * cout;
                        for (ci, &xv) in xs.iter().enumerate() {
                            let ks = &k[k_base + ci * cout..k_base + (ci + 1) * cout];
                            for (ov, &kv) in o.iter_mut().zip(ks) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, win.out_h, win.out_w, cout], out).expect("conv output shape")
}

/// Returns (d input, d kernel). The input gradient is skipped when not needed.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeometry,
    dy: &Tensor,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let ConvGeometry { n, h, w, cin, cout, win } = *g;
    let x = input.data();
    let k = kernel.data();
    let d = dy.data();
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dk = if need_dk { vec![0.0; k.len()] } else { Vec::new() };
    for b in 0..n {
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o_base = ((b * win.out_h + oh) * win.out_w + ow) * cout;
                let ds = &d[o_base..o_base + cout];
                for i in 0..win.kh {
                    let Some(ih) = win.source(oh, i, win.pad_top, h) else { continue };
                    for j in 0..win.kw {
                        let Some(iw) = win.source(ow, j, win.pad_left, w) else { continue };
                        let x_base = ((b * h + ih) * w + iw) * cin;
                        let k_base = (i * win.kw + j) * cin * cout;
                        for ci in 0..cin {
                            let kr = k_base + ci * cout..k_base + (ci + 1) * cout;
                            if need_dk {
                                let xv = x[x_base + ci];
                                for (dkv, &dv) in dk[kr.clone()].iter_mut().zip(ds) {
                                    *dkv += xv * dv;
                                }
                            }
                            if need_dx {
                                let mut acc = 0.0;
                                for (&kv, &dv) in k[kr].iter().zip(ds) {
                                    acc += kv * dv;
                                }
                                dx[x_base + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::new(input.shape().to_vec(), dx).unwrap());
    let dk = need_dk.then(|| Tensor::new(kernel.shape().to_vec(), dk).unwrap());
    (dx, dk)
}

// ---------------------------------------------------------------------------
// batch normalization

/// Per-channel scale/shift plus the moving statistics used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub moving_mean: Tensor,
    /// Moving estimate of the (biased) variance.
    pub moving_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

pub const DEFAULT_BN_EPSILON: f64 = 1e-3;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

impl BatchNormParams {
    /// gamma = 1, beta = 0, moving mean 0, moving variance 1.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::ones(&[channels]),
            epsilon: DEFAULT_BN_EPSILON,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [("beta", &self.beta), ("moving_mean", &self.moving_mean), ("moving_var", &self.moving_var)] {
            if t.shape() != [c] {
                return Err(Error::shape(format!("batchnorm {name} has shape {:?}, expected [{c}]", t.shape())));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("batchnorm epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid(format!("batchnorm momentum must be in (0,1), got {}", self.momentum)));
        }
        if self.moving_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("batchnorm moving variance has negative entries"));
        }
        Ok(())
    }

    /// Exponential-average update of the moving statistics; returns the new pair.
    pub fn updated_moving_stats(&self, stats: &BatchStats) -> (Tensor, Tensor) {
        let m = self.momentum;
        let mean = self.moving_mean.zip_with(&stats.mean, |old, b| m * old + (1.0 - m) * b).unwrap();
        let var = self.moving_var.zip_with(&stats.var, |old, b| m * old + (1.0 - m) * b).unwrap();
        (mean, var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

/// Per-channel batch mean and biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Mean and biased variance over all leading axes.
pub fn channel_moments(x: &Tensor) -> Result<BatchStats> {
    let c = x.channels();
    if x.numel() == 0 || c == 0 {
        return Err(Error::invalid("batch statistics of an empty batch"));
    }
    let m = x.numel() / c;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    for v in &mut var {
        *v /= m as f64;
    }
    Ok(BatchStats { mean: Tensor::from_vec(mean), var: Tensor::from_vec(var) })
}

pub(crate) struct BnForward {
    pub out: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub stats: Option<BatchStats>,
}

pub(crate) fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    params: &BatchNormParams,
    mode: Mode,
) -> Result<BnForward> {
    let c = x.channels();
    if gamma.numel() != c || beta.numel() != c || params.moving_mean.numel() != c || params.moving_var.numel() != c {
        return Err(Error::shape(format!(
            "batchnorm over input {:?} needs {c}-channel parameters, got gamma {:?}",
            x.shape(),
            gamma.shape()
        )));
    }
    let (mean, var, stats) = match mode {
        Mode::Training => {
            let s = channel_moments(x)?;
            (s.mean.data().to_vec(), s.var.data().to_vec(), Some(s))
        }
        Mode::Inference => (params.moving_mean.data().to_vec(), params.moving_var.data().to_vec(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.epsilon).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    let (g, bt) = (gamma.data(), beta.data());
    for row in x.data().chunks_exact(c) {
        for k in 0..c {
            let xh = (row[k] - mean[k]) * inv_std[k];
            xhat.push(xh);
            out.push(g[k] * xh + bt[k]);
        }
    }
    let shape = x.shape().to_vec();
    Ok(BnForward { out: Tensor::new(shape.clone(), out)?, xhat: Tensor::new(shape, xhat)?, inv_std, stats })
}

/// Convenience wrapper returning only the output and batch statistics.
pub fn batchnorm(x: &Tensor, params: &BatchNormParams, mode: Mode) -> Result<(Tensor, Option<BatchStats>)> {
    let f = batchnorm_forward(x, &params.gamma, &params.beta, params, mode)?;
    Ok((f.out, f.stats))
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn batchnorm_backward(
    dy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    mode: Mode,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let m = (dy.numel() / c) as f64;
    let g = gamma.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (drow, xrow) in dy.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
        for k in 0..c {
            dbeta[k] += drow[k];
            dgamma[k] += drow[k] * xrow[k];
        }
    }
    let mut dx = Vec::with_capacity(dy.numel());
    match mode {
        Mode::Inference => {
            for drow in dy.data().chunks_exact(c) {
                for k in 0..c {
                    dx.push(drow[k] * g[k] * inv_std[k]);
                }
            }
        }
        Mode::Training => {
            // dxhat = dy * gamma; sums of dxhat and dxhat * xhat are dbeta*gamma, dgamma*gamma
            for (drow, xrow) in dy.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
                for k in 0..c {
                    let dxhat = drow[k] * g[k];
                    let v = (m * dxhat - g[k] * dbeta[k] - xrow[k] * g[k] * dgamma[k]) * inv_std[k] / m;
                    dx.push(v);
                }
            }
        }
    }
    (Tensor::new(dy.shape().to_vec(), dx).unwrap(), Tensor::from_vec(dgamma), Tensor::from_vec(dbeta))
}

// ---------------------------------------------------------------------------
// pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub win: Window,
}

pub fn pool_geometry(x: &Tensor, size: usize, stride: usize, padding: Padding) -> Result<PoolGeometry> {
    let (n, h, w, c) = nhwc(x, "pool input")?;
    let win = Window::new(h, w, size, size, stride, padding)?;
    Ok(PoolGeometry { n, h, w, c, win })
}

/// Max pooling; padded positions never win. Also returns the flat argmax of
/// every output element.
pub(crate) fn maxpool_forward(x: &Tensor, g: &PoolGeometry) -> (Tensor, Vec<usize>) {
    let PoolGeometry { n, h, w, c, win } = *g;
    let xd = x.data();
    let total = n * win.out_h * win.out_w * c;
    let mut out = vec![f64::NEG_INFINITY; total];
    let mut arg = vec![usize::MAX; total];
    for b in 0..n {
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o_base = ((b * win.out_h + oh) * win.out_w + ow) * c;
                for i in 0..win.kh {
                    let Some(ih) = win.source(oh, i, win.pad_top, h) else { continue };
                    for j in 0..win.kw {
                        let Some(iw) = win.source(ow, j, win.pad_left, w) else { continue };
                        let x_base = ((b * h + ih) * w + iw) * c;
                        for k in 0..c {
                            let v = xd[x_base + k];
                            if v > out[o_base + k] || arg[o_base + k] == usize::MAX {
                                out[o_base + k] = v;
                                arg[o_base + k] = x_base + k;
                            }
                        }
                    }
                }
            }
        }
    }
    (Tensor::new(vec![n, win.out_h, win.out_w, c], out).unwrap(), arg)
}

pub fn maxpool(x: &Tensor, size: usize, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = pool_geometry(x, size, stride, padding)?;
    Ok(maxpool_forward(x, &g).0)
}

/// Average over the in-bounds window elements only, so constants stay constant
/// under `same` padding.
pub(crate) fn avgpool_forward(x: &Tensor, g: &PoolGeometry) -> Tensor {
    let PoolGeometry { n, h, w, c, win } = *g;
    let xd = x.data();
    let mut out = vec![0.0; n * win.out_h * win.out_w * c];
    for b in 0..n {
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o_base = ((b * win.out_h + oh) * win.out_w + ow) * c;
                let mut count = 0usize;
                for i in 0..win.kh {
                    let Some(ih) = win.source(oh, i, win.pad_top, h) else { continue };
                    for j in 0..win.kw {
                        let Some(iw) = win.source(ow, j, win.pad_left, w) else { continue };
                        count += 1;
                        let x_base = ((b * h + ih) * w + iw) * c;
                        for k in 0..c {
                            out[o_base + k] += xd[x_base + k];
                        }
                    }
                }
                let inv = 1.0 / count as f64;
                for v in &mut out[o_base..o_base + c] {
                    *v *= inv;
                }
            }
        }
    }
    Tensor::new(vec![n, win.out_h, win.out_w, c], out).unwrap()
}

pub(crate) fn avgpool_backward(dy: &Tensor, g: &PoolGeometry) -> Tensor {
    let PoolGeometry { n, h, w, c, win } = *g;
    let d = dy.data();
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o_base = ((b * win.out_h + oh) * win.out_w + ow) * c;
                let mut sources = Vec::with_capacity(win.kh * win.kw);
                for i in 0..win.kh {
                    let Some(ih) = win.source(oh, i, win.pad_top, h) else { continue };
                    for j in 0..win.kw {
                        let Some(iw) = win.source(ow, j, win.pad_left, w) else { continue };
                        sources.push(((b * h + ih) * w + iw) * c);
                    }
                }
                let inv = 1.0 / sources.len() as f64;
                for x_base in sources {
                    for k in 0..c {
                        dx[x_base + k] += d[o_base + k] * inv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, h, w, c], dx).unwrap()
}

pub fn avgpool(x: &Tensor, size: usize, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = pool_geometry(x, size, stride, padding)?;
    Ok(avgpool_forward(x, &g))
}

// ---------------------------------------------------------------------------
// pointwise, dense, loss

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Adds a per-channel vector along the last axis.
pub fn bias_add(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.channels();
    if bias.numel() != c {
        return Err(Error::shape(format!("bias {:?} does not match channels of {:?}", bias.shape(), x.shape())));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Sum over all leading axes, keeping the channel axis.
pub(crate) fn channel_sums(x: &Tensor) -> Tensor {
    let c = x.channels();
    let mut s = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor::from_vec(s)
}

/// `input[N, D] @ weight[D, O] + bias[O]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d) = match *input.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::shape(format!("dense input must be rank-2, got {s:?}"))),
    };
    let (wd, o) = match *weight.shape() {
        [a, b] => (a, b),
        ref s => return Err(Error::shape(format!("dense weight must be rank-2, got {s:?}"))),
    };
    if wd != d {
        return Err(Error::shape(format!(
            "dense weight {:?} does not match input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    if let Some(b) = bias {
        if b.numel() != o {
            return Err(Error::shape(format!("dense bias {:?} does not match {o} outputs", b.shape())));
        }
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        let orow = &mut out[r * o..(r + 1) * o];
        if let Some(b) = bias {
            orow.copy_from_slice(b.data());
        }
        for (i, &xv) in x[r * d..(r + 1) * d].iter().enumerate() {
            for (ov, &wv) in orow.iter_mut().zip(&wt[i * o..(i + 1) * o]) {
                *ov += xv * wv;
            }
        }
    }
    Tensor::new(vec![n, o], out)
}

/// Returns (dx, dW); the bias gradient is `channel_sums(dy)`.
pub(crate) fn dense_backward(input: &Tensor, weight: &Tensor, dy: &Tensor, need_dx: bool) -> (Option<Tensor>, Tensor) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[1];
    let x = input.data();
    let wt = weight.data();
    let g = dy.data();
    let mut dw = vec![0.0; d * o];
    let mut dx = if need_dx { vec![0.0; n * d] } else { Vec::new() };
    for r in 0..n {
        let grow = &g[r * o..(r + 1) * o];
        for i in 0..d {
            let wrow = &wt[i * o..(i + 1) * o];
            let xv = x[r * d + i];
            for (dwv, &gv) in dw[i * o..(i + 1) * o].iter_mut().zip(grow) {
                *dwv += xv * gv;
            }
            if need_dx {
                let mut acc = 0.0;
                for (&wv, &gv) in wrow.iter().zip(grow) {
                    acc += wv * gv;
                }
                dx[r * d + i] = acc;
            }
        }
    }
    (need_dx.then(|| Tensor::new(vec![n, d], dx).unwrap()), Tensor::new(vec![d, o], dw).unwrap())
}

/// Row-wise softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.channels();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Mean cross-entropy over the batch; logits may be `[N, C]` or `[N, 1, 1, C]`.
/// Returns (loss, softmax probabilities).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let c = logits.channels();
    let n = logits.numel() / c;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    Ok((loss / n as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop reference for the valid-padding convolution.
    fn reference_conv_valid(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
        let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let xi = |b: usize, i: usize, j: usize, c: usize| x.data()[((b * h + i) * w + j) * cin + c];
        let ki = |i: usize, j: usize, a: usize, o: usize| k.data()[((i * kw + j) * cin + a) * cout + o];
        let mut out = Vec::new();
        for b in 0..n {
            for p in 0..oh {
                for q in 0..ow {
                    for o in 0..cout {
                        let mut s = 0.0;
                        for i in 0..kh {
                            for j in 0..kw {
                                for a in 0..cin {
                                    s += xi(b, p * stride + i, q * stride + j, a) * ki(i, j, a, o);
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        Tensor::new(vec![n, oh, ow, cout], out).unwrap()
    }

    #[test]
    fn window_lengths() {
        assert_eq!(window_output(32, 5, 1, Padding::Same), Some((32, 2)));
        assert_eq!(window_output(32, 3, 2, Padding::Same), Some((16, 0)));
        assert_eq!(window_output(8, 4, 1, Padding::Same), Some((8, 1)));
        assert_eq!(window_output(26, 3, 2, Padding::Valid), Some((12, 0)));
        assert_eq!(window_output(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 5, 5, 3], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn conv_of_constant_channel_is_kernel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 1.75;
        let x = Tensor::full(&[1, 6, 6, 1], c);
        let k = Tensor::randn(&[3, 3, 1, 2], 1.0, &mut rng);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        for o in 0..2 {
            let ksum: f64 = (0..9).map(|ij| k.data()[ij * 2 + o]).sum();
            for row in y.data().chunks_exact(2) {
                assert!((row[o] - c * ksum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 3, 2, 3], 1.0, &mut rng);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        let r = reference_conv_valid(&x, &k, 1);
        assert!(y.max_abs_diff(&r) <= 1e-12);

        let x = Tensor::randn(&[2, 7, 6, 3], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 4], 1.0, &mut rng);
        let y = conv2d(&x, &k, 2, Padding::Valid).unwrap();
        assert!(y.max_abs_diff(&reference_conv_valid(&x, &k, 2)) <= 1e-12);
    }

    #[test]
    fn same_padding_equals_valid_on_explicitly_padded_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 5, 4, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 3, 2, 2], 1.0, &mut rng);
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 5, 4, 2]);
        // kh=4 pads 1 top, 2 bottom; kw=3 pads 1 left, 1 right
        let (ph, pw) = (5 + 3, 4 + 2);
        let mut padded = Tensor::zeros(&[1, ph, pw, 2]);
        for i in 0..5 {
            for j in 0..4 {
                for c in 0..2 {
                    padded.data_mut()[((i + 1) * pw + j + 1) * 2 + c] = x.data()[(i * 4 + j) * 2 + c];
                }
            }
        }
        let r = reference_conv_valid(&padded, &k, 1);
        assert!(y.max_abs_diff(&r) <= 1e-12);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[1, 4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        let msg = conv2d(&x, &k, 1, Padding::Valid).unwrap_err().to_string();
        assert!(msg.contains("[3, 3, 3, 1]") && msg.contains("[1, 4, 4, 2]"), "{msg}");
    }

    #[test]
    fn batchnorm_identity_in_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut rng);
        let mut p = BatchNormParams::identity(4);
        p.epsilon = 1e-300;
        let (y, stats) = batchnorm(&x, &p, Mode::Inference).unwrap();
        assert!(stats.is_none());
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn zero_gamma_gives_constant_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[3, 4, 4, 3], 2.0, &mut rng);
        let mut p = BatchNormParams::identity(3);
        p.gamma.data_mut()[1] = 0.0;
        p.beta = Tensor::from_vec(vec![0.1, -0.7, 0.3]);
        for mode in [Mode::Training, Mode::Inference] {
            let (y, _) = batchnorm(&x, &p, mode).unwrap();
            assert!(y.data().chunks_exact(3).all(|r| r[1] == -0.7));
        }
    }

    #[test]
    fn batchnorm_training_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[4, 5, 5, 3], 3.0, &mut rng).map(|v| v + 2.0);
        let mut p = BatchNormParams::identity(3);
        p.gamma = Tensor::from_vec(vec![0.5, 2.0, -1.5]);
        p.beta = Tensor::zeros(&[3]);
        let (y, stats) = batchnorm(&x, &p, Mode::Training).unwrap();
        let stats = stats.unwrap();
        // independent moments of the output
        let out = channel_moments(&y).unwrap();
        for k in 0..3 {
            let var = stats.var.data()[k];
            let g = p.gamma.data()[k];
            let expect = g * g * var / (var + p.epsilon);
            assert!(out.mean.data()[k].abs() <= 1e-10);
            assert!((out.var.data()[k] - expect).abs() <= 1e-6);
        }
    }

    #[test]
    fn batchnorm_rejects_empty_batch_and_updates_moving_stats() {
        let p = BatchNormParams::identity(2);
        let stats = BatchStats { mean: Tensor::from_vec(vec![1.0, -1.0]), var: Tensor::from_vec(vec![4.0, 0.0]) };
        let (m, v) = p.updated_moving_stats(&stats);
        assert_eq!(m.data(), &[(1.0 - 0.99) * 1.0, -(1.0 - 0.99)]);
        assert!((v.data()[0] - (0.99 + 0.04)).abs() < 1e-15);
        assert!((v.data()[1] - 0.99).abs() < 1e-15);
        assert!(channel_moments(&Tensor::from_vec(vec![])).is_err());
    }

    #[test]
    fn relu_pool_and_loss_basics() {
        let r = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&r), r);

        let x = Tensor::full(&[1, 7, 7, 2], 0.3);
        for padding in [Padding::Valid, Padding::Same] {
            let m = maxpool(&x, 3, 2, padding).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.3));
            let a = avgpool(&x, 3, 2, padding).unwrap();
            assert!(a.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }

        let logits = Tensor::zeros(&[3, 7]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 3, 7]).is_err());
    }

    #[test]
    fn dense_with_bias() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let b = Tensor::from_vec(vec![0.5, -0.5]);
        let y = dense(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.5, 5.5]);
    }
}
