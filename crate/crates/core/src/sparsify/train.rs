//! SGD training where the γ vectors of prunable layers take ISTA steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{GammaUpdate, IstaConfig};
use super::monitor::{EpochRecord, GammaState, TrainMonitor};
use super::prox::ista_step;
use crate::autodiff::Tape;
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, ParamKey, ParamSlot};
use crate::ops::{self, Mode};
use crate::tensor::Tensor;

/// Run-level options that are not optimizer hyper-parameters.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Seeds batch order and augmentation.
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Plateau,
    /// Loss or a gradient became non-finite; the returned graph is the state
    /// before the failing step.
    Diverged {
        step: usize,
        detail: String,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: NetworkGraph,
    pub monitor: TrainMonitor,
    pub stop: StopReason,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.stop, StopReason::Diverged { .. })
    }
}

struct Optimizer<'c> {
    config: &'c IstaConfig,
    keys: Vec<ParamKey>,
    /// λ^l for layers whose γ takes ISTA steps.
    lambdas: Vec<Option<f64>>,
    velocity: Vec<Option<Tensor>>,
    shadow: Option<Vec<Tensor>>,
}

impl<'c> Optimizer<'c> {
    fn new(graph: &NetworkGraph, config: &'c IstaConfig) -> Result<Self> {
        let keys = graph.param_keys();
        let mut lambdas = vec![None; graph.len()];
        if config.gamma_update == GammaUpdate::Ista {
            for l in graph.prunable_layers() {
                lambdas[l] = Some(graph.penalty_lambda(l)?);
            }
        }
        let shadow = config.ema_decay.map(|_| keys.iter().map(|&k| graph.param(k).unwrap().clone()).collect());
        Ok(Optimizer { config, velocity: vec![None; keys.len()], keys, lambdas, shadow })
    }

    fn apply(&mut self, graph: &mut NetworkGraph, grads: &[Tensor], step: usize) -> Result<()> {
        let mu = self.config.lr_at(step);
        let rho = self.config.rho_at(step);
        for (i, &key) in self.keys.iter().enumerate() {
            let g = &grads[i];
            let p = graph.param_mut(key).expect("registered key");
            match (key.slot, self.lambdas[key.layer]) {
                (ParamSlot::Gamma, Some(lambda)) => *p = ista_step(p, g, mu, lambda, rho)?,
                _ => {
                    let dir = if self.config.momentum > 0.0 {
                        let m = self.config.momentum;
                        let v = match self.velocity[i].take() {
                            Some(v) => v.zip_with(g, |a, b| m * a + b)?,
                            None => g.clone(),
                        };
                        self.velocity[i] = Some(v.clone());
                        v
                    } else {
                        g.clone()
                    };
                    *p = p.zip_with(&dir, |a, b| a - mu * b)?;
                }
            }
        }
        if let (Some(shadow), Some(decay)) = (self.shadow.as_mut(), self.config.ema_decay) {
            let d = decay.min((1.0 + step as f64) / (10.0 + step as f64));
            for (s, &key) in shadow.iter_mut().zip(&self.keys) {
                *s = s.zip_with(graph.param(key).unwrap(), |a, b| d * a + (1.0 - d) * b)?;
            }
        }
        Ok(())
    }

    /// The model handed back to the caller: the parameter average if enabled,
    /// with γ zeros of the raw iterate kept exact so pruning sees the same mask.
    fn finalize(&self, raw: &NetworkGraph) -> NetworkGraph {
        let Some(shadow) = &self.shadow else { return raw.clone() };
        let mut out = raw.clone();
        for (s, &key) in shadow.iter().zip(&self.keys) {
            let mut v = s.clone();
            if key.slot == ParamSlot::Gamma && raw.layer(key.layer).prunable() {
                for (a, &r) in v.data_mut().iter_mut().zip(raw.param(key).unwrap().data()) {
                    if r == 0.0 {
                        *a = 0.0;
                    }
                }
            }
            *out.param_mut(key).unwrap() = v;
        }
        out
    }
}

/// Loss and per-parameter gradients of one training-mode batch. Moving
/// statistics of batch-normalized layers are updated in place.
fn forward_backward(graph: &mut NetworkGraph, x: Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = graph.register_params(&mut tape);
    let input = tape.leaf(x);
    let pass = graph.forward_tape(&mut tape, &vars, input, Mode::Training)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for (key, var) in vars.iter() {
        let g = grads.get(var).expect("gradient for every trainable parameter").clone();
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {:?} in layer `{}`",
                key.slot,
                graph.layer(key.layer).name()
            )));
        }
        out.push(g);
    }
    graph.apply_bn_stats(&pass.bn_stats);
    Ok((value, out))
}

/// Trains `graph` on `data`. Non-γ parameters (and γ of non-prunable layers)
/// take plain SGD steps; γ of prunable layers take ISTA steps with threshold
/// `mu_t * rho_t * lambda^l`. One monitor record is written per pass over the
/// data. Stops at `max_steps`, on plateau (if enabled) or on divergence.
pub fn train(
    graph: &NetworkGraph,
    data: &Dataset,
    config: &IstaConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    graph.validate()?;
    if data.num_classes != graph.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes but the network outputs {}",
            data.num_classes,
            graph.num_classes()
        )));
    }
    let dims = data.dims();
    if dims != graph.input_dims() {
        return Err(Error::shape(format!(
            "dataset images are {dims:?} but the network expects {:?}",
            graph.input_dims()
        )));
    }
    let mut g = graph.clone();
    let mut opt = Optimizer::new(&g, config)?;
    let mut monitor = TrainMonitor::new(g.num_classes(), config.plateau_window, config.plateau_tol);
    let mut order_rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(options.seed);
    aug_rng.set_stream(1);
    let batch = config.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    loop {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks_exact(batch) {
            let (mut x, labels) = data.batch(idx);
            if let Some(a) = &options.augment {
                x = augment(&x, a, data.stats.as_ref(), &mut aug_rng)?;
            }
            let result = forward_backward(&mut g, x, &labels)
                .and_then(|(loss, grads)| opt.apply(&mut g, &grads, step).map(|()| loss));
            let loss = match result {
                Ok(l) => l,
                Err(Error::NonFinite(detail)) => {
                    return Ok(TrainOutcome {
                        graph: opt.finalize(&g),
                        monitor,
                        stop: StopReason::Diverged { step, detail },
                        steps: step,
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss;
            batches += 1;
            step += 1;
            if step == config.max_steps {
                break;
            }
        }
        let state = GammaState::capture(&g)?;
        let last = step - 1;
        monitor.record(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            sparsity_fraction: state.sparsity(),
            lasso_term: state.lasso(config.rho_at(last)),
            lr: config.lr_at(last),
        });
        epoch += 1;
        if step == config.max_steps {
            return Ok(TrainOutcome { graph: opt.finalize(&g), monitor, stop: StopReason::MaxSteps, steps: step });
        }
        if config.stop_on_plateau && monitor.plateaued() {
            return Ok(TrainOutcome { graph: opt.finalize(&g), monitor, stop: StopReason::Plateau, steps: step });
        }
    }
}

/// Inference-mode accuracy and mean cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

pub fn evaluate(graph: &NetworkGraph, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    if batch_size == 0 {
        return Err(Error::invalid("evaluation batch size must be positive"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = data.batch(chunk);
        let logits = graph.forward(&x, Mode::Inference)?;
        let (l, _) = ops::softmax_cross_entropy(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        let c = logits.channels();
        for (row, &y) in logits.data().chunks_exact(c).zip(&labels) {
            let pred = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            correct += usize::from(pred == y);
        }
    }
    let n = data.len();
    Ok(EvalMetrics { accuracy: correct as f64 / n as f64, loss: loss / n as f64, samples: n })
}
