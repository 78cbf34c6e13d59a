//! Test-side helpers: finite-difference gradient checking and random
//! networks. Shared by several integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chanprune::autodiff::{Tape, Var};
use chanprune::graph::{FeatureDims, GraphBuilder, LayerId, NetworkGraph, ParamKey};
use chanprune::ops::{BatchNormParams, Mode, Padding, PoolKind};
use chanprune::{Result, Tensor};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// ‖a − b‖ / max(‖a‖, ‖b‖), or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error between reverse-mode gradients of the scalar built by
/// `f` and central finite differences, over every input tensor.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut numeric = vec![0.0; x.numel()];
        let mut xs = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = x.data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Values bounded away from zero so ReLU kinks are never straddled by the
/// finite-difference step.
pub fn away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values (a random permutation of an evenly spaced grid) so a
/// max-pool argmax never flips under the finite-difference step.
pub fn distinct<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn weights_like<R: Rng>(t: &Tensor, rng: &mut R) -> Tensor {
    Tensor::randn(t.shape(), 1.0, rng)
}

fn padding<R: Rng>(rng: &mut R) -> Padding {
    if rng.gen::<bool>() {
        Padding::Same
    } else {
        Padding::Valid
    }
}

/// Names of the primitive ops covered by [`op_trial`].
pub const OPS: [&str; 13] = [
    "conv2d",
    "bias_add",
    "batchnorm_train",
    "batchnorm_infer",
    "relu",
    "maxpool",
    "avgpool",
    "dense",
    "add",
    "reshape",
    "softmax_cross_entropy",
    "sum",
    "weighted_sum",
];

/// One gradient check of `op` on randomly drawn shapes; returns the worst
/// relative error. Non-scalar outputs are reduced with random weights.
pub fn op_trial<R: Rng>(op: &str, rng: &mut R) -> f64 {
    let n = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let c = rng.gen_range(1..=3);
    let x = away_from_zero(&[n, h, w, c], rng);
    let probe = |tape: &mut Tape, y: Var, seed: &Tensor| -> Result<Var> { tape.weighted_sum(y, seed.clone()) };
    match op {
        "conv2d" => {
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = padding(rng);
            let cout = rng.gen_range(1..=3);
            let kern = Tensor::randn(&[k, k, c, cout], 0.5, rng);
            let out = chanprune::ops::conv2d(&x, &kern, stride, pad).unwrap();
            let wts = weights_like(&out, rng);
            gradcheck(&[x, kern], &|t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                probe(t, y, &wts)
            })
        }
        "bias_add" => {
            let b = Tensor::randn(&[c], 1.0, rng);
            let wts = weights_like(&x, rng);
            gradcheck(&[x, b], &|t, v| {
                let y = t.bias_add(v[0], v[1])?;
                probe(t, y, &wts)
            })
        }
        "batchnorm_train" | "batchnorm_infer" => {
            let n = n.max(2);
            let x = Tensor::randn(&[n, h, w, c], 1.0, rng);
            let gamma = Tensor::randn(&[c], 1.0, rng);
            let beta = Tensor::randn(&[c], 1.0, rng);
            let mut params = BatchNormParams::identity(c);
            params.moving_mean = Tensor::randn(&[c], 0.5, rng);
            params.moving_var = Tensor::rand_uniform(&[c], 0.5, 2.0, rng);
            let mode = if op == "batchnorm_train" { Mode::Training } else { Mode::Inference };
            let wts = Tensor::randn(&[n, h, w, c], 1.0, rng);
            gradcheck(&[x, gamma, beta], &|t, v| {
                let (y, _) = t.batchnorm(v[0], v[1], v[2], &params, mode)?;
                probe(t, y, &wts)
            })
        }
        "relu" => {
            let wts = weights_like(&x, rng);
            gradcheck(&[x], &|t, v| {
                let y = t.relu(v[0]);
                probe(t, y, &wts)
            })
        }
        "maxpool" | "avgpool" => {
            let x = distinct(&[n, h, w, c], rng);
            let size = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = padding(rng);
            let out = if op == "maxpool" {
                chanprune::ops::maxpool(&x, size, stride, pad)
            } else {
                chanprune::ops::avgpool(&x, size, stride, pad)
            }
            .unwrap();
            let wts = weights_like(&out, rng);
            let is_max = op == "maxpool";
            gradcheck(&[x], &|t, v| {
                let y = if is_max { t.maxpool(v[0], size, stride, pad)? } else { t.avgpool(v[0], size, stride, pad)? };
                probe(t, y, &wts)
            })
        }
        "dense" => {
            let fin = rng.gen_range(1..=8);
            let fout = rng.gen_range(1..=5);
            let a = Tensor::randn(&[n, fin], 1.0, rng);
            let wt = Tensor::randn(&[fin, fout], 0.5, rng);
            let wts = Tensor::randn(&[n, fout], 1.0, rng);
            if rng.gen::<bool>() {
                let b = Tensor::randn(&[fout], 1.0, rng);
                gradcheck(&[a, wt, b], &|t, v| {
                    let y = t.dense(v[0], v[1], Some(v[2]))?;
                    probe(t, y, &wts)
                })
            } else {
                gradcheck(&[a, wt], &|t, v| {
                    let y = t.dense(v[0], v[1], None)?;
                    probe(t, y, &wts)
                })
            }
        }
        "add" => {
            let y = Tensor::randn(x.shape(), 1.0, rng);
            let wts = weights_like(&x, rng);
            gradcheck(&[x, y], &|t, v| {
                let s = t.add(v[0], v[1])?;
                probe(t, s, &wts)
            })
        }
        "reshape" => {
            let shape = [n * h, w * c];
            let wts = Tensor::randn(&shape, 1.0, rng);
            gradcheck(&[x], &|t, v| {
                let y = t.reshape(v[0], &shape)?;
                probe(t, y, &wts)
            })
        }
        "softmax_cross_entropy" => {
            let classes = rng.gen_range(2..=6);
            let logits = Tensor::randn(&[n, classes], 2.0, rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            gradcheck(&[logits], &|t, v| t.softmax_cross_entropy(v[0], &labels))
        }
        "sum" => gradcheck(&[x], &|t, v| Ok(t.sum(v[0]))),
        "weighted_sum" => {
            let wts = weights_like(&x, rng);
            gradcheck(&[x], &|t, v| probe(t, v[0], &wts))
        }
        other => panic!("unknown op {other}"),
    }
}

/// Worst relative error per op over `trials` random shapes each.
pub fn op_suite<R: Rng>(trials: usize, rng: &mut R) -> Vec<(&'static str, f64)> {
    OPS.iter().map(|&op| (op, (0..trials).map(|_| op_trial(op, rng)).fold(0.0, f64::max))).collect()
}

/// Random, non-trivial BN parameters and biases for every layer.
pub fn randomize<R: Rng>(g: &mut NetworkGraph, rng: &mut R) {
    for l in 0..g.len() {
        if let Some(p) = g.params_mut(l) {
            if let Some(b) = p.bias.as_mut() {
                *b = Tensor::randn(b.shape(), 0.5, rng);
            }
            if let Some(bn) = p.bn.as_mut() {
                let c = bn.channels();
                bn.gamma = Tensor::randn(&[c], 1.0, rng);
                bn.beta = Tensor::randn(&[c], 1.0, rng);
                bn.moving_mean = Tensor::randn(&[c], 0.5, rng);
                bn.moving_var = Tensor::rand_uniform(&[c], 0.3, 2.0, rng);
            }
        }
    }
}

/// A random valid-padding network: 2–4 conv layers with mixed BN/no-BN,
/// optional ReLU and pooling between them, and a dense classifier. At least
/// the first conv is batch-normalized so something is prunable.
pub fn random_valid_net<R: Rng>(rng: &mut R) -> NetworkGraph {
    loop {
        let mut b = GraphBuilder::new(FeatureDims::new(12, 12, 2));
        let mut x = b.input();
        let mut side = 12usize;
        let convs = rng.gen_range(2..=4);
        for i in 0..convs {
            let k = rng.gen_range(1..=3).min(side);
            let bn = i == 0 || rng.gen_bool(0.6);
            let ch = rng.gen_range(2..=5);
            x = b.conv(&format!("conv{i}"), x, k, 1, Padding::Valid, ch, bn);
            side = side - k + 1;
            if rng.gen_bool(0.7) {
                x = b.relu(&format!("relu{i}"), x);
            }
            if side >= 4 && rng.gen_bool(0.5) {
                let op = if rng.gen::<bool>() { PoolKind::Max } else { PoolKind::Avg };
                x = b.pool(&format!("pool{i}"), x, op, 2, 2, Padding::Valid);
                side /= 2;
            }
        }
        x = b.dense("logits", x, 3, false);
        let mut g = match b.build(x, rng) {
            Ok(g) => g,
            Err(_) => continue,
        };
        if g.prunable_layers().is_empty() {
            continue;
        }
        randomize(&mut g, rng);
        return g;
    }
}

/// Zeroes a random subset of γ in every prunable layer, keeping at least one
/// channel per layer.
pub fn random_zero_mask<R: Rng>(g: &mut NetworkGraph, rng: &mut R) -> usize {
    let mut zeroed = 0;
    for l in g.prunable_layers() {
        let bn = g.params_mut(l).unwrap().bn.as_mut().unwrap();
        let c = bn.channels();
        let keep = rng.gen_range(0..c);
        for k in 0..c {
            if k != keep && rng.gen_bool(0.5) {
                bn.gamma.data_mut()[k] = 0.0;
                zeroed += 1;
            }
        }
    }
    zeroed
}

/// Training-mode gradients of the mean cross-entropy for every parameter.
pub fn param_grads(g: &NetworkGraph, x: &Tensor, labels: &[usize]) -> BTreeMap<ParamKey, Tensor> {
    let mut tape = Tape::new();
    let vars = g.register_params(&mut tape);
    let input = tape.leaf(x.clone());
    let pass = g.forward_tape(&mut tape, &vars, input, Mode::Training).unwrap();
    let n = x.shape()[0];
    let logits = tape.reshape(pass.logits, &[n, g.num_classes()]).unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter().map(|(k, v)| (k, grads.get(v).unwrap().clone())).collect()
}

/// Layers fed (through activations and pools) by prunable layer `l`.
pub fn consumers(g: &NetworkGraph, l: LayerId) -> Vec<LayerId> {
    g.consumers(l).into_iter().collect()
}

/// argmin over a fine grid of ½(z − x)² + η|z|, refined once around the best cell.
pub fn grid_argmin(x: f64, eta: f64) -> f64 {
    let obj = |z: f64| 0.5 * (z - x).powi(2) + eta * z.abs();
    let search = |lo: f64, hi: f64, n: usize| {
        let step = (hi - lo) / n as f64;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=n {
            let z = lo + i as f64 * step;
            let v = obj(z);
            if v < best.0 {
                best = (v, z);
            }
        }
        // zero is a kink and must always be a candidate
        if lo <= 0.0 && hi >= 0.0 && obj(0.0) <= best.0 {
            best = (obj(0.0), 0.0);
        }
        (best.1, step)
    };
    let r = x.abs() + 1.0;
    let (z, step) = search(-r, r, 20_000);
    search(z - step, z + step, 2_000).0
}
