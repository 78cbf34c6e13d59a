//! Networks as channel-to-channel computation graphs.
//!
//! A [`NetworkGraph`] is an ordered list of layers where every layer only reads
//! layers that precede it, so the order is a topological order. Convolution and
//! dense layers own their parameters; every other layer is parameter-free.
//!
//! Batch normalization is folded into the conv/dense layer that feeds it
//! (`batchnorm = true`), and such layers carry no bias.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{window_output, BatchNormParams, BatchStats, Mode, Padding, PoolKind};
use crate::tensor::Tensor;

pub type LayerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        FeatureDims { height, width, channels }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
        channels: usize,
        batchnorm: bool,
    },
    /// Fully connected layer over the whole input feature map. Its weight is
    /// stored as a `[in_h, in_w, in_c, out]` kernel, so it behaves like a
    /// valid convolution whose kernel covers the input.
    Dense {
        channels: usize,
        batchnorm: bool,
    },
    Pool {
        op: PoolKind,
        size: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    AddJoin,
    Output,
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    pub fn has_batchnorm(&self) -> bool {
        matches!(self, LayerKind::Conv { batchnorm: true, .. } | LayerKind::Dense { batchnorm: true, .. })
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::AddJoin => 2,
            _ => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Relu => "relu",
            LayerKind::AddJoin => "add_join",
            LayerKind::Output => "output",
        }
    }
}

/// Structural description of one layer (no parameter values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<LayerId>,
    pub prunable: bool,
}

/// Parameters of a conv/dense layer. `weight` is `[kh, kw, in_c, out_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: LayerId,
    pub slot: ParamSlot,
}

impl Params {
    pub fn get(&self, slot: ParamSlot) -> Option<&Tensor> {
        match slot {
            ParamSlot::Weight => Some(&self.weight),
            ParamSlot::Bias => self.bias.as_ref(),
            ParamSlot::Gamma => self.bn.as_ref().map(|b| &b.gamma),
            ParamSlot::Beta => self.bn.as_ref().map(|b| &b.beta),
        }
    }

    pub fn get_mut(&mut self, slot: ParamSlot) -> Option<&mut Tensor> {
        match slot {
            ParamSlot::Weight => Some(&mut self.weight),
            ParamSlot::Bias => self.bias.as_mut(),
            ParamSlot::Gamma => self.bn.as_mut().map(|b| &mut b.gamma),
            ParamSlot::Beta => self.bn.as_mut().map(|b| &mut b.beta),
        }
    }

    /// Trainable slots present on this layer, in a fixed order.
    pub fn slots(&self) -> Vec<ParamSlot> {
        let mut s = vec![ParamSlot::Weight];
        if self.bias.is_some() {
            s.push(ParamSlot::Bias);
        }
        if self.bn.is_some() {
            s.extend([ParamSlot::Gamma, ParamSlot::Beta]);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Option<Params>,
    dims: FeatureDims,
}

impl Layer {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn kind(&self) -> &LayerKind {
        &self.spec.kind
    }

    pub fn inputs(&self) -> &[LayerId] {
        &self.spec.inputs
    }

    pub fn prunable(&self) -> bool {
        self.spec.prunable
    }

    /// Output feature-map dimensions.
    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn bn(&self) -> Option<&BatchNormParams> {
        self.params.as_ref().and_then(|p| p.bn.as_ref())
    }
}

/// Serializable structure of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDescription {
    pub input: FeatureDims,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input: FeatureDims,
    layers: Vec<Layer>,
    successors: Vec<Vec<LayerId>>,
}

/// Tape handles for the trainable parameters of one graph.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: Vec<(ParamKey, Var)>,
}

impl ParamVars {
    pub fn get(&self, key: ParamKey) -> Option<Var> {
        self.vars.iter().find(|(k, _)| *k == key).map(|&(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, Var)> + '_ {
        self.vars.iter().copied()
    }
}

pub struct ForwardPass {
    pub logits: Var,
    /// Batch statistics of every batch-normalized layer (training mode only).
    pub bn_stats: Vec<(LayerId, BatchStats)>,
    /// Output of every layer, indexed by layer id.
    pub outputs: Vec<Var>,
}

fn infer_dims(kind: &LayerKind, inputs: &[FeatureDims], graph_input: FeatureDims, name: &str) -> Result<FeatureDims> {
    let err = |msg: String| Error::graph(format!("layer `{name}`: {msg}"));
    match kind {
        LayerKind::Input => Ok(graph_input),
        LayerKind::Conv { kernel_h, kernel_w, stride, padding, channels, .. } => {
            let i = inputs[0];
            let (h, _) = window_output(i.height, *kernel_h, *stride, *padding)
                .ok_or_else(|| err(format!("kernel {kernel_h}x{kernel_w} does not fit {}x{}", i.height, i.width)))?;
            let (w, _) = window_output(i.width, *kernel_w, *stride, *padding)
                .ok_or_else(|| err(format!("kernel {kernel_h}x{kernel_w} does not fit {}x{}", i.height, i.width)))?;
            if *channels == 0 {
                return Err(err("zero output channels".into()));
            }
            Ok(FeatureDims::new(h, w, *channels))
        }
        LayerKind::Dense { channels, .. } => {
            if *channels == 0 {
                return Err(err("zero output channels".into()));
            }
            Ok(FeatureDims::new(1, 1, *channels))
        }
        LayerKind::Pool { size, stride, padding, .. } => {
            let i = inputs[0];
            let (h, _) = window_output(i.height, *size, *stride, *padding)
                .ok_or_else(|| err(format!("pool window {size} does not fit {}x{}", i.height, i.width)))?;
            let (w, _) = window_output(i.width, *size, *stride, *padding)
                .ok_or_else(|| err(format!("pool window {size} does not fit {}x{}", i.height, i.width)))?;
            Ok(FeatureDims::new(h, w, i.channels))
        }
        LayerKind::Relu | LayerKind::Output => Ok(inputs[0]),
        LayerKind::AddJoin => {
            if inputs[0] != inputs[1] {
                return Err(err(format!("add_join of mismatched maps {:?} and {:?}", inputs[0], inputs[1])));
            }
            Ok(inputs[0])
        }
    }
}

impl NetworkGraph {
    /// Assembles a graph from structure and parameters and validates it.
    pub fn from_parts(input: FeatureDims, specs: Vec<LayerSpec>, mut params: Vec<Option<Params>>) -> Result<Self> {
        if specs.len() != params.len() {
            return Err(Error::graph(format!("{} layers but {} parameter entries", specs.len(), params.len())));
        }
        let mut layers: Vec<Layer> = Vec::with_capacity(specs.len());
        for (id, (spec, p)) in specs.into_iter().zip(params.drain(..)).enumerate() {
            if spec.inputs.len() != spec.kind.arity() {
                return Err(Error::graph(format!(
                    "layer `{}` ({}) needs {} inputs, has {}",
                    spec.name,
                    spec.kind.label(),
                    spec.kind.arity(),
                    spec.inputs.len()
                )));
            }
            if let Some(&bad) = spec.inputs.iter().find(|&&i| i >= id) {
                return Err(Error::graph(format!(
                    "layer `{}` reads layer {bad}, which is not earlier in the order (cycle or forward edge)",
                    spec.name
                )));
            }
            let in_dims: Vec<FeatureDims> = spec.inputs.iter().map(|&i| layers[i].dims).collect();
            let dims = infer_dims(&spec.kind, &in_dims, input, &spec.name)?;
            layers.push(Layer { spec, params: p, dims });
        }
        let mut successors = vec![Vec::new(); layers.len()];
        for (id, l) in layers.iter().enumerate() {
            for &i in l.inputs() {
                successors[i].push(id);
            }
        }
        let g = NetworkGraph { input, layers, successors };
        g.validate()?;
        Ok(g)
    }

    pub fn from_description(desc: &GraphDescription, params: Vec<Option<Params>>) -> Result<Self> {
        Self::from_parts(desc.input, desc.layers.clone(), params)
    }

    pub fn description(&self) -> GraphDescription {
        GraphDescription { input: self.input, layers: self.layers.iter().map(|l| l.spec.clone()).collect() }
    }

    /// A graph with the given structure and freshly He-initialized parameters.
    pub fn initialize<R: Rng + ?Sized>(desc: &GraphDescription, rng: &mut R) -> Result<Self> {
        let dims = spec_dims(desc.input, &desc.layers)?;
        let params = init_all(&desc.layers, &dims, rng);
        Self::from_description(desc, params)
    }

    /// Structure and parameters, the inverse of [`NetworkGraph::from_parts`].
    pub fn into_parts(self) -> (FeatureDims, Vec<LayerSpec>, Vec<Option<Params>>) {
        let (specs, params) = self.layers.into_iter().map(|l| (l.spec, l.params)).unzip();
        (self.input, specs, params)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n < 2 {
            return Err(Error::graph("a graph needs at least an input and an output layer"));
        }
        if !matches!(self.layers[0].kind(), LayerKind::Input) {
            return Err(Error::graph("layer 0 must be the input layer"));
        }
        for (id, l) in self.layers.iter().enumerate() {
            let name = l.name();
            match l.kind() {
                LayerKind::Input if id != 0 => {
                    return Err(Error::graph(format!("extra input layer `{name}`")));
                }
                LayerKind::Output if id != n - 1 => {
                    return Err(Error::graph(format!("output layer `{name}` must be last")));
                }
                _ => {}
            }
            if id == n - 1 && !matches!(l.kind(), LayerKind::Output) {
                return Err(Error::graph("the last layer must be the output layer"));
            }
            if self.layers[..id].iter().any(|o| o.name() == name) {
                return Err(Error::graph(format!("duplicate layer name `{name}`")));
            }
            self.validate_params(id)?;
            if l.prunable() {
                self.validate_prunable(id)?;
            }
        }
        let classifier = self.classifier()?;
        if self.layers[classifier].kind().has_batchnorm() {
            return Err(Error::graph(format!(
                "final classifier `{}` must not be batch-normalized",
                self.layers[classifier].name()
            )));
        }
        Ok(())
    }

    fn validate_params(&self, id: LayerId) -> Result<()> {
        let l = &self.layers[id];
        let name = l.name();
        if !l.kind().is_weighted() {
            if l.params.is_some() {
                return Err(Error::graph(format!("layer `{name}` ({}) cannot carry parameters", l.kind().label())));
            }
            return Ok(());
        }
        let p = l.params.as_ref().ok_or_else(|| Error::graph(format!("layer `{name}` has no parameters")))?;
        let (kh, kw) = self.kernel_dims(id);
        let cin = self.in_dims(id).channels;
        let cout = l.dims.channels;
        let expect = [kh, kw, cin, cout];
        if p.weight.shape() != expect {
            return Err(Error::graph(format!(
                "layer `{name}` weight has shape {:?}, expected {expect:?}",
                p.weight.shape()
            )));
        }
        let bn = l.kind().has_batchnorm();
        match (&p.bias, bn) {
            (Some(_), true) => {
                return Err(Error::graph(format!("batch-normalized layer `{name}` must not have a bias")))
            }
            (None, false) => return Err(Error::graph(format!("layer `{name}` without batchnorm needs a bias"))),
            (Some(b), false) if b.shape() != [cout] => {
                return Err(Error::graph(format!("layer `{name}` bias has shape {:?}, expected [{cout}]", b.shape())))
            }
            _ => {}
        }
        match (&p.bn, bn) {
            (Some(b), true) => {
                if b.channels() != cout {
                    return Err(Error::graph(format!(
                        "layer `{name}` batchnorm has {} channels, layer has {cout}",
                        b.channels()
                    )));
                }
                b.validate().map_err(|e| Error::graph(format!("layer `{name}`: {e}")))?;
            }
            (None, true) => return Err(Error::graph(format!("layer `{name}` is missing its batchnorm parameters"))),
            (Some(_), false) => {
                return Err(Error::graph(format!("layer `{name}` has unexpected batchnorm parameters")))
            }
            (None, false) => {}
        }
        Ok(())
    }

    fn validate_prunable(&self, id: LayerId) -> Result<()> {
        let name = self.layers[id].name();
        if !self.layers[id].kind().has_batchnorm() {
            return Err(Error::graph(format!("prunable layer `{name}` must be batch-normalized")));
        }
        let reach = self.reach(id);
        if reach.consumers.is_empty() {
            return Err(Error::graph(format!("prunable layer `{name}` has no conv/dense consumers")));
        }
        if reach.hits_join || reach.hits_output {
            return Err(Error::graph(format!(
                "prunable layer `{name}` feeds an add_join or the output directly; its channels cannot be removed"
            )));
        }
        if reach.relu_on_path.len() != 1 {
            return Err(Error::graph(format!(
                "prunable layer `{name}` reaches its consumers through inconsistent activations"
            )));
        }
        Ok(())
    }

    /// Whether `id` satisfies every structural requirement for pruning.
    pub fn can_prune(&self, id: LayerId) -> bool {
        if !self.layers[id].kind().has_batchnorm() {
            return false;
        }
        let r = self.reach(id);
        !r.consumers.is_empty() && !r.hits_join && !r.hits_output && r.relu_on_path.len() == 1
    }

    fn reach(&self, id: LayerId) -> Reach {
        let mut r = Reach::default();
        let mut queue: VecDeque<(LayerId, bool)> = self.successors[id].iter().map(|&s| (s, false)).collect();
        let mut seen = BTreeSet::new();
        while let Some((s, relu)) = queue.pop_front() {
            if !seen.insert((s, relu)) {
                continue;
            }
            match self.layers[s].kind() {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                    r.consumers.insert(s);
                    r.relu_on_path.insert(relu);
                }
                LayerKind::Relu => queue.extend(self.successors[s].iter().map(|&t| (t, true))),
                LayerKind::Pool { .. } => queue.extend(self.successors[s].iter().map(|&t| (t, relu))),
                LayerKind::AddJoin => {
                    r.hits_join = true;
                    queue.extend(self.successors[s].iter().map(|&t| (t, relu)));
                }
                LayerKind::Output => r.hits_output = true,
                LayerKind::Input => unreachable!("input has no producers"),
            }
        }
        r
    }

    /// T(l): the conv/dense layers that read layer `l`'s output channels,
    /// looking through relu, pooling and add_join layers.
    pub fn consumers(&self, l: LayerId) -> BTreeSet<LayerId> {
        self.reach(l).consumers
    }

    /// Whether the channels of prunable layer `l` pass through a ReLU before
    /// reaching its consumers.
    pub fn relu_before_consumers(&self, l: LayerId) -> bool {
        self.reach(l).relu_on_path.contains(&true)
    }

    pub fn input_dims(&self) -> FeatureDims {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> &Layer {
        &self.layers[id]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn successors(&self, id: LayerId) -> &[LayerId] {
        &self.successors[id]
    }

    pub fn find(&self, name: &str) -> Option<LayerId> {
        self.layers.iter().position(|l| l.name() == name)
    }

    pub fn params(&self, id: LayerId) -> Option<&Params> {
        self.layers[id].params.as_ref()
    }

    /// Mutable access to parameter values. Shapes must be preserved.
    pub fn params_mut(&mut self, id: LayerId) -> Option<&mut Params> {
        self.layers[id].params.as_mut()
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params(key.layer).and_then(|p| p.get(key.slot))
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        self.params_mut(key.layer).and_then(|p| p.get_mut(key.slot))
    }

    /// Every trainable parameter key in layer order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(id, l)| l.params.as_ref().map(|p| (id, p)))
            .flat_map(|(id, p)| p.slots().into_iter().map(move |slot| ParamKey { layer: id, slot }))
            .collect()
    }

    pub fn prunable_layers(&self) -> Vec<LayerId> {
        (0..self.layers.len()).filter(|&i| self.layers[i].prunable()).collect()
    }

    pub fn bn_layers(&self) -> Vec<LayerId> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind().has_batchnorm()).collect()
    }

    /// The conv/dense layer whose output reaches the output layer.
    pub fn classifier(&self) -> Result<LayerId> {
        let mut cur =
            *self.layers.last().unwrap().inputs().first().ok_or_else(|| Error::graph("output has no input"))?;
        loop {
            match self.layers[cur].kind() {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => return Ok(cur),
                LayerKind::Input | LayerKind::AddJoin => {
                    return Err(Error::graph("output is not produced by a conv/dense classifier"))
                }
                _ => cur = self.layers[cur].inputs()[0],
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().dims.channels
    }

    /// Input feature-map dims of a layer with at least one input.
    pub fn in_dims(&self, id: LayerId) -> FeatureDims {
        match self.layers[id].inputs().first() {
            Some(&i) => self.layers[i].dims,
            None => self.input,
        }
    }

    /// Spatial kernel of a conv/dense layer; a dense layer's kernel is its
    /// whole input map.
    pub fn kernel_dims(&self, id: LayerId) -> (usize, usize) {
        match self.layers[id].kind() {
            LayerKind::Conv { kernel_h, kernel_w, .. } => (*kernel_h, *kernel_w),
            LayerKind::Dense { .. } => {
                let d = self.in_dims(id);
                (d.height, d.width)
            }
            _ => (0, 0),
        }
    }

    /// Per-channel memory cost λ^l of a prunable layer:
    /// `(kh*kw*c_in + Σ_{l' in T(l)} kh'*kw'*c_out' + H_l*W_l) / (H_in*W_in)`.
    pub fn penalty_lambda(&self, l: LayerId) -> Result<f64> {
        let (num, den) = self.penalty_lambda_ratio(l)?;
        Ok(num as f64 / den as f64)
    }

    /// λ^l as an exact (numerator, denominator) pair of integers.
    pub fn penalty_lambda_ratio(&self, l: LayerId) -> Result<(u64, u64)> {
        let layer = &self.layers[l];
        if !layer.kind().is_weighted() {
            return Err(Error::invalid(format!("layer `{}` is not a conv/dense layer", layer.name())));
        }
        let consumers = self.consumers(l);
        if consumers.is_empty() {
            return Err(Error::invalid(format!(
                "layer `{}` has no consumers; removing its channels would sever the graph",
                layer.name()
            )));
        }
        let (kh, kw) = self.kernel_dims(l);
        let own = (kh * kw * self.in_dims(l).channels) as u64;
        let downstream: u64 = consumers
            .iter()
            .map(|&c| {
                let (ch, cw) = self.kernel_dims(c);
                (ch * cw * self.layers[c].dims.channels) as u64
            })
            .sum();
        let map = layer.dims.area() as u64;
        Ok((own + downstream + map, self.input.area() as u64))
    }

    /// Kernel elements + biases + four vectors (γ, β, μ, σ) per batch-normalized layer.
    pub fn count_params(&self) -> u64 {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| {
                p.weight.numel() as u64
                    + p.bias.as_ref().map_or(0, |b| b.numel() as u64)
                    + p.bn.as_ref().map_or(0, |b| 4 * b.channels() as u64)
            })
            .sum()
    }

    /// Twice the multiply-accumulates of every conv/dense layer for one image.
    pub fn count_flops(&self) -> u64 {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind().is_weighted())
            .map(|i| {
                let (kh, kw) = self.kernel_dims(i);
                let out = self.layers[i].dims;
                let macs = out.area() * kh * kw * self.in_dims(i).channels * out.channels;
                2 * macs as u64
            })
            .sum()
    }

    /// Registers every trainable parameter on the tape in layer order.
    pub fn register_params(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .param_keys()
            .into_iter()
            .map(|k| (k, tape.param(self.param(k).expect("key from param_keys").clone())))
            .collect();
        ParamVars { vars }
    }

    /// Registers parameters as constants (no gradients).
    pub fn register_constants(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .param_keys()
            .into_iter()
            .map(|k| (k, tape.leaf(self.param(k).expect("key from param_keys").clone())))
            .collect();
        ParamVars { vars }
    }

    /// Records the forward pass of a `[N, H, W, C]` batch on the tape.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &ParamVars, input: Var, mode: Mode) -> Result<ForwardPass> {
        let x = tape.value(input);
        let want = [self.input.height, self.input.width, self.input.channels];
        if x.rank() != 4 || x.shape()[1..] != want {
            return Err(Error::shape(format!("network expects [N, {want:?}] input, got {:?}", x.shape())));
        }
        let batch = x.shape()[0];
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        let key = |layer, slot| vars.get(ParamKey { layer, slot }).expect("registered parameter");
        for (id, layer) in self.layers.iter().enumerate() {
            let src = |k: usize| outputs[layer.inputs()[k]];
            let out = match layer.kind() {
                LayerKind::Input => input,
                LayerKind::Conv { stride, padding, .. } => {
                    let mut y = tape.conv2d(src(0), key(id, ParamSlot::Weight), *stride, *padding)?;
                    if layer.params.as_ref().unwrap().bias.is_some() {
                        y = tape.bias_add(y, key(id, ParamSlot::Bias))?;
                    }
                    self.maybe_bn(tape, id, y, mode, &key, &mut bn_stats)?
                }
                LayerKind::Dense { channels, .. } => {
                    let d = self.in_dims(id);
                    let flat = d.area() * d.channels;
                    let x = tape.reshape(src(0), &[batch, flat])?;
                    let w = tape.reshape(key(id, ParamSlot::Weight), &[flat, *channels])?;
                    let bias = layer.params.as_ref().unwrap().bias.as_ref().map(|_| key(id, ParamSlot::Bias));
                    let y = tape.dense(x, w, bias)?;
                    let y = tape.reshape(y, &[batch, 1, 1, *channels])?;
                    self.maybe_bn(tape, id, y, mode, &key, &mut bn_stats)?
                }
                LayerKind::Pool { op, size, stride, padding } => match op {
                    PoolKind::Max => tape.maxpool(src(0), *size, *stride, *padding)?,
                    PoolKind::Avg => tape.avgpool(src(0), *size, *stride, *padding)?,
                },
                LayerKind::Relu => tape.relu(src(0)),
                LayerKind::AddJoin => tape.add(src(0), src(1))?,
                LayerKind::Output => src(0),
            };
            outputs.push(out);
        }
        Ok(ForwardPass { logits: *outputs.last().unwrap(), bn_stats, outputs })
    }

    fn maybe_bn(
        &self,
        tape: &mut Tape,
        id: LayerId,
        y: Var,
        mode: Mode,
        key: &dyn Fn(LayerId, ParamSlot) -> Var,
        stats: &mut Vec<(LayerId, BatchStats)>,
    ) -> Result<Var> {
        match self.layers[id].bn() {
            Some(bn) => {
                let (out, s) = tape.batchnorm(y, key(id, ParamSlot::Gamma), key(id, ParamSlot::Beta), bn, mode)?;
                if let Some(s) = s {
                    stats.push((id, s));
                }
                Ok(out)
            }
            None => Ok(y),
        }
    }

    /// Forward pass without gradients; returns the logits as `[N, classes]`.
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let outs = self.forward_all(input, mode)?;
        let logits = outs.last().unwrap().clone();
        let n = logits.shape()[0];
        logits.reshape(&[n, self.num_classes()])
    }

    /// Forward pass returning every layer's output.
    pub fn forward_all(&self, input: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.register_constants(&mut tape);
        let x = tape.leaf(input.clone());
        let pass = self.forward_tape(&mut tape, &vars, x, mode)?;
        Ok(pass.outputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Replaces the moving statistics of batch-normalized layers with their
    /// exponential-average update from `stats`.
    pub fn apply_bn_stats(&mut self, stats: &[(LayerId, BatchStats)]) {
        for (id, s) in stats {
            if let Some(bn) = self.layers[*id].params.as_mut().and_then(|p| p.bn.as_mut()) {
                let (m, v) = bn.updated_moving_stats(s);
                bn.moving_mean = m;
                bn.moving_var = v;
            }
        }
    }

    /// Total number of γ entries over prunable layers.
    pub fn prunable_gamma_count(&self) -> usize {
        self.prunable_layers().iter().map(|&l| self.layers[l].bn().unwrap().channels()).sum()
    }
}

#[derive(Default)]
struct Reach {
    consumers: BTreeSet<LayerId>,
    relu_on_path: BTreeSet<bool>,
    hits_join: bool,
    hits_output: bool,
}

/// Incremental graph construction with He-normal initialization.
pub struct GraphBuilder {
    input: FeatureDims,
    specs: Vec<LayerSpec>,
    auto_prune: Vec<bool>,
}

impl GraphBuilder {
    pub fn new(input: FeatureDims) -> Self {
        GraphBuilder {
            input,
            specs: vec![LayerSpec { name: "input".into(), kind: LayerKind::Input, inputs: vec![], prunable: false }],
            auto_prune: vec![false],
        }
    }

    pub fn input(&self) -> LayerId {
        0
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<LayerId>) -> LayerId {
        let auto = kind.has_batchnorm();
        self.specs.push(LayerSpec { name: name.to_string(), kind, inputs, prunable: false });
        self.auto_prune.push(auto);
        self.specs.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        from: LayerId,
        kernel: usize,
        stride: usize,
        padding: Padding,
        channels: usize,
        batchnorm: bool,
    ) -> LayerId {
        self.push(
            name,
            LayerKind::Conv { kernel_h: kernel, kernel_w: kernel, stride, padding, channels, batchnorm },
            vec![from],
        )
    }

    pub fn dense(&mut self, name: &str, from: LayerId, channels: usize, batchnorm: bool) -> LayerId {
        self.push(name, LayerKind::Dense { channels, batchnorm }, vec![from])
    }

    pub fn pool(
        &mut self,
        name: &str,
        from: LayerId,
        op: PoolKind,
        size: usize,
        stride: usize,
        padding: Padding,
    ) -> LayerId {
        self.push(name, LayerKind::Pool { op, size, stride, padding }, vec![from])
    }

    pub fn relu(&mut self, name: &str, from: LayerId) -> LayerId {
        self.push(name, LayerKind::Relu, vec![from])
    }

    pub fn add_join(&mut self, name: &str, a: LayerId, b: LayerId) -> LayerId {
        self.push(name, LayerKind::AddJoin, vec![a, b])
    }

    /// Disables automatic prunability for one layer.
    pub fn freeze(&mut self, id: LayerId) {
        self.auto_prune[id] = false;
    }

    /// Adds the output marker and initializes parameters. Batch-normalized
    /// layers that satisfy the pruning constraints are marked prunable.
    pub fn build<R: Rng + ?Sized>(mut self, from: LayerId, rng: &mut R) -> Result<NetworkGraph> {
        self.push("output", LayerKind::Output, vec![from]);
        let dims = spec_dims(self.input, &self.specs)?;
        let params = init_all(&self.specs, &dims, rng);
        let mut g = NetworkGraph::from_parts(self.input, self.specs, params)?;
        let flags: Vec<bool> = (0..g.len()).map(|i| self.auto_prune[i] && g.can_prune(i)).collect();
        for (l, f) in g.layers.iter_mut().zip(flags) {
            l.spec.prunable = f;
        }
        g.validate()?;
        Ok(g)
    }
}

/// (output, input) feature dims of every layer.
fn spec_dims(input: FeatureDims, specs: &[LayerSpec]) -> Result<Vec<(FeatureDims, FeatureDims)>> {
    let mut out: Vec<FeatureDims> = Vec::new();
    let mut res = Vec::new();
    for s in specs {
        if let Some(&bad) = s.inputs.iter().find(|&&i| i >= out.len()) {
            return Err(Error::graph(format!(
                "layer `{}` reads layer {bad}, which is not earlier in the order",
                s.name
            )));
        }
        let ins: Vec<FeatureDims> = s.inputs.iter().map(|&i| out[i]).collect();
        if ins.len() != s.kind.arity() {
            return Err(Error::graph(format!("layer `{}` needs {} inputs, has {}", s.name, s.kind.arity(), ins.len())));
        }
        let d = infer_dims(&s.kind, &ins, input, &s.name)?;
        res.push((d, ins.first().copied().unwrap_or(input)));
        out.push(d);
    }
    Ok(res)
}

fn init_all<R: Rng + ?Sized>(
    specs: &[LayerSpec],
    dims: &[(FeatureDims, FeatureDims)],
    rng: &mut R,
) -> Vec<Option<Params>> {
    specs
        .iter()
        .zip(dims)
        .map(|(spec, (out, inp))| match &spec.kind {
            LayerKind::Conv { kernel_h, kernel_w, batchnorm, .. } => {
                Some(init_params([*kernel_h, *kernel_w, inp.channels, out.channels], *batchnorm, rng))
            }
            LayerKind::Dense { batchnorm, .. } => {
                Some(init_params([inp.height, inp.width, inp.channels, out.channels], *batchnorm, rng))
            }
            _ => None,
        })
        .collect()
}

fn init_params<R: Rng + ?Sized>(shape: [usize; 4], batchnorm: bool, rng: &mut R) -> Params {
    let fan_in = shape[0] * shape[1] * shape[2];
    let std = (2.0 / fan_in as f64).sqrt();
    let weight = Tensor::randn(&shape, std, rng);
    let cout = shape[3];
    Params {
        weight,
        bias: (!batchnorm).then(|| Tensor::zeros(&[cout])),
        bn: batchnorm.then(|| BatchNormParams::identity(cout)),
    }
}
