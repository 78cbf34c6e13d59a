//! Removal of constant channels.
//!
//! A channel whose BN scale γ is exactly zero outputs the constant β (or
//! relu(β) after an activation). Every conv/dense consumer sees that
//! constant multiplied by the spatial sum of its kernel slice, so the channel
//! can be deleted and the contribution folded into the consumer's bias, or,
//! when the consumer is batch-normalized, subtracted from its moving mean.
//! The fold is exact when the consumer does not zero-pad; with `same`
//! padding the border positions differ and the result needs fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerId, LayerKind, NetworkGraph, Params};
use crate::ops::{channel_moments, BatchNormParams, Mode, Padding};
use crate::tensor::Tensor;

/// Keep flags and dropped-channel constants of one prunable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub keep: Vec<bool>,
    /// Value the channel emits towards its consumers: relu(β) when an
    /// activation sits on the path, β otherwise. Only used for dropped channels.
    pub constants: Vec<f64>,
}

impl LayerMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn dropped(&self) -> usize {
        self.keep.len() - self.kept()
    }

    fn kept_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&k| self.keep[k]).collect()
    }
}

/// Per-layer masks, keyed by layer id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: BTreeMap<LayerId, LayerMask>,
}

fn channel_constants(graph: &NetworkGraph, l: LayerId) -> Vec<f64> {
    let beta = &graph.layer(l).bn().expect("prunable layers carry batch norm").beta;
    if graph.relu_before_consumers(l) {
        beta.data().iter().map(|&b| b.max(0.0)).collect()
    } else {
        beta.data().to_vec()
    }
}

impl PruneMask {
    pub fn empty() -> Self {
        PruneMask::default()
    }

    /// Builds a mask from explicit keep flags (used to force channel counts).
    pub fn from_keep(graph: &NetworkGraph, keep: impl IntoIterator<Item = (LayerId, Vec<bool>)>) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (l, k) in keep {
            if l >= graph.len() || !graph.layer(l).prunable() {
                return Err(Error::invalid(format!("layer {l} is not prunable")));
            }
            let c = graph.layer(l).dims().channels;
            if k.len() != c {
                return Err(Error::shape(format!(
                    "mask for `{}` has {} entries, layer has {c} channels",
                    graph.layer(l).name(),
                    k.len()
                )));
            }
            layers.insert(l, LayerMask { keep: k, constants: channel_constants(graph, l) });
        }
        Ok(PruneMask { layers })
    }

    pub fn total(&self) -> usize {
        self.layers.values().map(|m| m.keep.len()).sum()
    }

    pub fn dropped(&self) -> usize {
        self.layers.values().map(LayerMask::dropped).sum()
    }

    /// Fraction of masked channels that are dropped.
    pub fn sparsity(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.dropped() as f64 / t as f64,
        }
    }
}

/// Marks every channel of every prunable layer whose γ is exactly zero.
pub fn detect_constant_channels(graph: &NetworkGraph) -> PruneMask {
    let keep = graph.prunable_layers().into_iter().map(|l| {
        let g = &graph.layer(l).bn().expect("prunable layers carry batch norm").gamma;
        (l, g.data().iter().map(|&v| v != 0.0).collect())
    });
    PruneMask::from_keep(graph, keep).expect("masks derived from the graph itself are consistent")
}

/// `Σ_{k dropped} constants[k] · Σ_{i,j} W[i, j, k, o]` for every output `o`.
fn constant_contribution(kernel: &Tensor, keep: &[bool], constants: &[f64]) -> Result<Vec<f64>> {
    if kernel.rank() != 4 {
        return Err(Error::shape(format!("kernel must be [kh, kw, cin, cout], got {:?}", kernel.shape())));
    }
    let (kh, kw, cin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if keep.len() != cin || constants.len() != cin {
        return Err(Error::shape(format!(
            "mask covers {} channels (constants {}) but the kernel {:?} reads {cin}",
            keep.len(),
            constants.len(),
            kernel.shape()
        )));
    }
    let mut out = vec![0.0; cout];
    let w = kernel.data();
    for k in (0..cin).filter(|&k| !keep[k]) {
        let c = constants[k];
        if c == 0.0 {
            continue;
        }
        for ij in 0..kh * kw {
            let row = &w[(ij * cin + k) * cout..(ij * cin + k + 1) * cout];
            for (o, &v) in row.iter().enumerate() {
                out[o] += c * v;
            }
        }
    }
    Ok(out)
}

/// New bias of a consumer without batch norm: `b + Σ_dropped c_k · ΣW[:, :, k, :]`.
pub fn absorb_into_bias(bias: &Tensor, kernel: &Tensor, keep: &[bool], constants: &[f64]) -> Result<Tensor> {
    let delta = constant_contribution(kernel, keep, constants)?;
    if bias.numel() != delta.len() {
        return Err(Error::shape(format!("bias has {} entries, kernel has {} outputs", bias.numel(), delta.len())));
    }
    Ok(Tensor::from_vec(bias.data().iter().zip(&delta).map(|(b, d)| b + d).collect()))
}

/// New moving mean of a batch-normalized consumer: `μ - Σ_dropped c_k · ΣW[:, :, k, :]`.
pub fn absorb_into_moving_mean(mean: &Tensor, kernel: &Tensor, keep: &[bool], constants: &[f64]) -> Result<Tensor> {
    let delta = constant_contribution(kernel, keep, constants)?;
    if mean.numel() != delta.len() {
        return Err(Error::shape(format!(
            "moving mean has {} entries, kernel has {} outputs",
            mean.numel(),
            delta.len()
        )));
    }
    Ok(Tensor::from_vec(mean.data().iter().zip(&delta).map(|(m, d)| m - d).collect()))
}

/// A compacted graph and whether the fold was approximate.
#[derive(Debug, Clone)]
pub struct Rewrite {
    pub graph: NetworkGraph,
    /// Some consumer zero-pads its input, so border outputs changed.
    pub requires_finetune: bool,
}

fn pads(graph: &NetworkGraph, c: LayerId) -> bool {
    match graph.layer(c).kind() {
        LayerKind::Conv { kernel_h, kernel_w, stride, padding: Padding::Same, .. } => {
            let i = graph.in_dims(c);
            let o = graph.layer(c).dims();
            let need = |out: usize, k: usize, len: usize| ((out - 1) * stride + k).saturating_sub(len) > 0;
            need(o.height, *kernel_h, i.height) || need(o.width, *kernel_w, i.width)
        }
        _ => false,
    }
}

/// Deletes the dropped channels and folds their constants into every consumer.
pub fn rewrite(graph: &NetworkGraph, mask: &PruneMask) -> Result<Rewrite> {
    for (&l, m) in &mask.layers {
        if l >= graph.len() || !graph.layer(l).prunable() {
            return Err(Error::Prune(format!("mask names layer {l}, which is not prunable")));
        }
        if m.keep.len() != graph.layer(l).dims().channels || m.constants.len() != m.keep.len() {
            return Err(Error::Prune(format!("mask for `{}` does not match its channel count", graph.layer(l).name())));
        }
        if m.kept() == 0 {
            return Err(Error::Prune(format!(
                "every one of the {} channels of `{}` has γ = 0; the layer would vanish and disconnect the network \
                 (the penalty rho is too large)",
                m.keep.len(),
                graph.layer(l).name()
            )));
        }
    }
    let active: Vec<(LayerId, &LayerMask)> =
        mask.layers.iter().filter(|(_, m)| m.dropped() > 0).map(|(&l, m)| (l, m)).collect();
    let mut requires_finetune = false;
    let (input, mut specs, mut params) = graph.clone().into_parts();

    // Fold constants using the unsliced kernels, then slice input channels.
    for &(l, m) in &active {
        for c in graph.consumers(l) {
            requires_finetune |= pads(graph, c);
            let p = params[c].as_mut().expect("consumers are weighted");
            match (&mut p.bn, &mut p.bias) {
                (Some(bn), _) => {
                    bn.moving_mean = absorb_into_moving_mean(&bn.moving_mean, &p.weight, &m.keep, &m.constants)?
                }
                (None, Some(b)) => *b = absorb_into_bias(b, &p.weight, &m.keep, &m.constants)?,
                (None, None) => {
                    let zero = Tensor::zeros(&[p.weight.shape()[3]]);
                    p.bias = Some(absorb_into_bias(&zero, &p.weight, &m.keep, &m.constants)?);
                }
            }
        }
    }
    for &(l, m) in &active {
        let kept = m.kept_indices();
        for c in graph.consumers(l) {
            let p = params[c].as_mut().unwrap();
            p.weight = p.weight.select_axis(2, &kept);
        }
        let p = params[l].as_mut().unwrap();
        p.weight = p.weight.select_axis(3, &kept);
        let bn = p.bn.as_mut().unwrap();
        bn.gamma = bn.gamma.select_last(&kept);
        bn.beta = bn.beta.select_last(&kept);
        bn.moving_mean = bn.moving_mean.select_last(&kept);
        bn.moving_var = bn.moving_var.select_last(&kept);
        match &mut specs[l].kind {
            LayerKind::Conv { channels, .. } | LayerKind::Dense { channels, .. } => *channels = kept.len(),
            _ => unreachable!("prunable layers are conv/dense"),
        }
    }
    let graph = NetworkGraph::from_parts(input, specs, params)?;
    Ok(Rewrite { graph, requires_finetune })
}

/// Replaces the bias of a conv/dense layer without batch norm by an
/// equivalent batch norm: with μ, σ the per-channel mean and variance of the
/// bias-free output `W * x` over the calibration batches, set γ = √(σ + ε),
/// β = b + μ and use μ, σ as moving statistics. Inference output is
/// unchanged; the layer becomes prunable when the graph structure allows it.
pub fn bn_equivalent_wrap(graph: &NetworkGraph, layer: LayerId, calibration: &[Tensor]) -> Result<NetworkGraph> {
    if calibration.is_empty() {
        return Err(Error::invalid("bn_equivalent_wrap needs at least one calibration batch"));
    }
    if layer >= graph.len() || !graph.layer(layer).kind().is_weighted() {
        return Err(Error::invalid(format!("layer {layer} is not a conv/dense layer")));
    }
    if graph.layer(layer).kind().has_batchnorm() {
        return Err(Error::invalid(format!("layer `{}` is already batch-normalized", graph.layer(layer).name())));
    }
    if graph.classifier()? == layer {
        return Err(Error::invalid("the classifier must stay without batch norm"));
    }
    let bias = graph.params(layer).and_then(|p| p.bias.clone()).expect("layers without batch norm carry a bias");
    // Bias-free outputs over all calibration batches, stacked along the batch axis.
    let mut rows = Vec::new();
    let mut count = 0;
    for x in calibration {
        let out = graph.forward_all(x, Mode::Inference)?.swap_remove(layer);
        count += out.shape()[0];
        let c = out.channels();
        rows.extend(out.data().chunks_exact(c).flat_map(|r| r.iter().zip(bias.data()).map(|(v, b)| v - b)));
    }
    let c = bias.numel();
    let stacked = Tensor::new(vec![rows.len() / c, 1, 1, c], rows)?;
    debug_assert!(count > 0);
    let moments = channel_moments(&stacked)?;
    let mut bn = BatchNormParams::identity(c);
    bn.gamma = moments.var.map(|v| (v + bn.epsilon).sqrt());
    bn.beta = bias.add(&moments.mean)?;
    bn.moving_mean = moments.mean;
    bn.moving_var = moments.var;

    let (input, mut specs, mut params) = graph.clone().into_parts();
    match &mut specs[layer].kind {
        LayerKind::Conv { batchnorm, .. } | LayerKind::Dense { batchnorm, .. } => *batchnorm = true,
        _ => unreachable!(),
    }
    let p = params[layer].as_mut().unwrap();
    *p = Params { weight: p.weight.clone(), bias: None, bn: Some(bn) };
    let mut g = NetworkGraph::from_parts(input, specs.clone(), params.clone())?;
    if g.can_prune(layer) {
        specs[layer].prunable = true;
        g = NetworkGraph::from_parts(input, specs, params)?;
    }
    Ok(g)
}

/// Channel and size accounting of one weighted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: LayerId,
    pub name: String,
    pub kept: usize,
    pub total: usize,
    pub params_before: u64,
    pub params_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerReport>,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub requires_finetune: bool,
}

fn layer_params(g: &NetworkGraph, l: LayerId) -> u64 {
    g.params(l).map_or(0, |p| {
        p.weight.numel() as u64
            + p.bias.as_ref().map_or(0, |b| b.numel() as u64)
            + p.bn.as_ref().map_or(0, |b| 4 * b.channels() as u64)
    })
}

impl PruneReport {
    /// Compares two graphs with the same layer structure.
    pub fn new(before: &NetworkGraph, after: &NetworkGraph, requires_finetune: bool) -> Result<Self> {
        if before.len() != after.len() {
            return Err(Error::invalid("report needs graphs with the same layers"));
        }
        let layers = (0..before.len())
            .filter(|&l| before.layer(l).kind().is_weighted())
            .map(|l| LayerReport {
                layer_id: l,
                name: before.layer(l).name().to_string(),
                kept: after.layer(l).dims().channels,
                total: before.layer(l).dims().channels,
                params_before: layer_params(before, l),
                params_after: layer_params(after, l),
            })
            .collect();
        Ok(PruneReport {
            layers,
            params_before: before.count_params(),
            params_after: after.count_params(),
            flops_before: before.count_flops(),
            flops_after: after.count_flops(),
            requires_finetune,
        })
    }

    /// `params_after / params_before`.
    pub fn ratio(&self) -> f64 {
        self.params_after as f64 / self.params_before as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer_id,kept,total,params_before,params_after\n");
        for r in &self.layers {
            s.push_str(&format!("{},{},{},{},{}\n", r.layer_id, r.kept, r.total, r.params_before, r.params_after));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str("# params = kernels + biases + 4 per batch-norm channel; flops = 2 x multiply-accumulates of conv/dense layers\n");
        s.push_str(&format!("{:<24} {:>6} {:>6} {:>12} {:>12}\n", "layer", "kept", "total", "params", "params_after"));
        for r in &self.layers {
            s.push_str(&format!(
                "{:<24} {:>6} {:>6} {:>12} {:>12}\n",
                r.name, r.kept, r.total, r.params_before, r.params_after
            ));
        }
        s.push_str(&format!(
            "params {} -> {} ({:.2}%), flops {} -> {}\n",
            self.params_before,
            self.params_after,
            100.0 * self.ratio(),
            self.flops_before,
            self.flops_after
        ));
        if self.requires_finetune {
            s.push_str("requires fine-tune: zero padding makes the constant fold approximate at feature-map borders\n");
        }
        s
    }
}

/// Detects, rewrites and reports in one call.
pub fn prune(graph: &NetworkGraph) -> Result<(Rewrite, PruneReport)> {
    let mask = detect_constant_channels(graph);
    let rw = rewrite(graph, &mask)?;
    let report = PruneReport::new(graph, &rw.graph, rw.requires_finetune)?;
    Ok((rw, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::FeatureDims;
    use crate::graph::GraphBuilder;
    use crate::ops::PoolKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bias_and_mean_examples() {
        // one dropped channel, β = 2, 1x1 kernel entry 3, b = 1
        let k = Tensor::new(vec![1, 1, 2, 1], vec![3.0, 5.0]).unwrap();
        let keep = [false, true];
        let consts = [2.0, 9.0];
        let b = absorb_into_bias(&Tensor::from_vec(vec![1.0]), &k, &keep, &consts).unwrap();
        assert_eq!(b.data(), &[7.0]);
        let m = absorb_into_moving_mean(&Tensor::from_vec(vec![0.0]), &k, &keep, &consts).unwrap();
        assert_eq!(m.data(), &[-6.0]);
        let zero = absorb_into_bias(&Tensor::from_vec(vec![1.0]), &k, &keep, &[0.0, 9.0]).unwrap();
        assert_eq!(zero.data(), &[1.0]);
        assert!(absorb_into_bias(&Tensor::from_vec(vec![1.0]), &k, &[true], &[0.0]).is_err());
    }

    fn small_net(seed: u64) -> NetworkGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::new(FeatureDims::new(10, 10, 2));
        let c1 = b.conv("c1", b.input(), 3, 1, Padding::Valid, 3, true);
        let r1 = b.relu("r1", c1);
        let p1 = b.pool("p1", r1, PoolKind::Max, 2, 2, Padding::Valid);
        let c2 = b.conv("c2", p1, 2, 1, Padding::Valid, 4, true);
        let r2 = b.relu("r2", c2);
        let fc = b.dense("fc", r2, 3, false);
        let mut g = b.build(fc, &mut rng).unwrap();
        for l in g.bn_layers() {
            let bn = g.params_mut(l).unwrap().bn.as_mut().unwrap();
            let c = bn.channels();
            bn.gamma = Tensor::rand_uniform(&[c], 0.5, 1.5, &mut rng);
            bn.beta = Tensor::rand_uniform(&[c], -1.0, 1.0, &mut rng);
            bn.moving_mean = Tensor::rand_uniform(&[c], -0.5, 0.5, &mut rng);
            bn.moving_var = Tensor::rand_uniform(&[c], 0.5, 2.0, &mut rng);
        }
        g
    }

    #[test]
    fn detect_example() {
        let mut g = small_net(1);
        let c1 = g.find("c1").unwrap();
        let bn = g.params_mut(c1).unwrap().bn.as_mut().unwrap();
        bn.gamma = Tensor::from_vec(vec![0.0, 0.3, 0.0]);
        bn.beta = Tensor::from_vec(vec![-1.0, 5.0, 2.0]);
        let m = detect_constant_channels(&g);
        assert_eq!(m.layers[&c1].keep, vec![false, true, false]);
        assert_eq!(m.layers[&c1].constants, vec![0.0, 5.0, 2.0]);
        let c2 = g.find("c2").unwrap();
        assert_eq!(m.layers[&c2].dropped(), 0);
    }

    #[test]
    fn valid_padding_rewrite_is_exact() {
        let mut g = small_net(2);
        let (c1, c2) = (g.find("c1").unwrap(), g.find("c2").unwrap());
        g.params_mut(c1).unwrap().bn.as_mut().unwrap().gamma.data_mut()[1] = 0.0;
        g.params_mut(c2).unwrap().bn.as_mut().unwrap().gamma.data_mut()[0] = 0.0;
        g.params_mut(c2).unwrap().bn.as_mut().unwrap().gamma.data_mut()[3] = 0.0;
        let (rw, report) = prune(&g).unwrap();
        assert!(!rw.requires_finetune);
        assert_eq!(rw.graph.layer(c1).dims().channels, 2);
        assert_eq!(rw.graph.layer(c2).dims().channels, 2);
        assert!(report.params_after < report.params_before);
        assert_eq!(report.params_after, rw.graph.count_params());
        let x = Tensor::randn(&[5, 10, 10, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let a = g.forward(&x, Mode::Inference).unwrap();
        let b = rw.graph.forward(&x, Mode::Inference).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-9, "{}", a.max_abs_diff(&b));
        // idempotent under an empty mask
        let again = rewrite(&rw.graph, &PruneMask::empty()).unwrap();
        assert_eq!(again.graph, rw.graph);
    }

    #[test]
    fn all_dropped_is_rejected() {
        let mut g = small_net(3);
        let c1 = g.find("c1").unwrap();
        g.params_mut(c1).unwrap().bn.as_mut().unwrap().gamma = Tensor::zeros(&[3]);
        let err = rewrite(&g, &detect_constant_channels(&g)).unwrap_err();
        assert!(matches!(err, Error::Prune(ref m) if m.contains("c1")), "{err}");
    }

    #[test]
    fn empty_mask_keeps_graph() {
        let g = small_net(4);
        let (rw, report) = prune(&g).unwrap();
        assert_eq!(rw.graph, g);
        assert_eq!(report.ratio(), 1.0);
        assert!(report.layers.iter().all(|r| r.kept == r.total));
        assert!(report.to_csv().starts_with("layer_id,kept,total,params_before,params_after\n"));
    }

    #[test]
    fn wrap_is_exact_with_calibration_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = GraphBuilder::new(FeatureDims::new(8, 8, 2));
        let c1 = b.conv("c1", b.input(), 3, 1, Padding::Valid, 4, false);
        let r1 = b.relu("r1", c1);
        let fc = b.dense("fc", r1, 3, false);
        let mut g = b.build(fc, &mut rng).unwrap();
        g.params_mut(c1).unwrap().bias = Some(Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng));
        let x = Tensor::randn(&[6, 8, 8, 2], 1.0, &mut rng);
        let w = bn_equivalent_wrap(&g, c1, std::slice::from_ref(&x)).unwrap();
        assert!(w.layer(c1).prunable());
        let a = g.forward(&x, Mode::Inference).unwrap();
        let b2 = w.forward(&x, Mode::Inference).unwrap();
        assert!(a.max_abs_diff(&b2) <= 1e-10);
        assert!(bn_equivalent_wrap(&g, c1, &[]).is_err());
    }
}
