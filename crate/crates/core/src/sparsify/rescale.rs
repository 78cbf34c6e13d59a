//! The γ-W rescaling trick and the α heuristic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerId, NetworkGraph};

/// Multiplies γ and β of every prunable layer by `alpha` and the kernels of
/// its consumers by `1 / alpha`.
///
/// β is scaled together with γ so that `relu(αγ·x̂ + αβ) = α·relu(γ·x̂ + β)`
/// and the consumers see exactly the original pre-activations; scaling γ
/// alone would shift the ReLU threshold.
pub fn rescale_gamma_w(graph: &NetworkGraph, alpha: f64) -> Result<NetworkGraph> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("rescaling factor must be positive and finite, got {alpha}")));
    }
    let mut out = graph.clone();
    if alpha == 1.0 {
        return Ok(out);
    }
    let inv = 1.0 / alpha;
    for l in graph.prunable_layers() {
        let bn = out.params_mut(l).and_then(|p| p.bn.as_mut()).expect("prunable layers carry batch norm");
        bn.gamma = bn.gamma.scale(alpha);
        bn.beta = bn.beta.scale(alpha);
        for c in graph.consumers(l) {
            let p = out.params_mut(c).expect("consumers are weighted");
            p.weight = p.weight.scale(inv);
        }
    }
    Ok(out)
}

/// Outcome of [`suggest_alpha`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSuggestion {
    pub alpha: f64,
    /// `(layer, 100·μ·λ·ρ / mean|γ|)` for every layer that entered the aggregate.
    pub per_layer: Vec<(LayerId, f64)>,
    pub reason: String,
}

pub const ALPHA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

/// Nearest grid value in log space.
pub fn snap_alpha(a: f64) -> f64 {
    let la = a.ln();
    *ALPHA_GRID.iter().min_by(|x, y| (x.ln() - la).abs().total_cmp(&(y.ln() - la).abs())).unwrap()
}

/// Picks α so that rescaled γ magnitudes sit near `100·μ·λ^l·ρ`.
///
/// Per-layer candidates are aggregated by geometric mean and snapped to
/// {0.001, 0.01, 0.1, 1}. Untrained networks (every prunable γ still at its
/// initial value 1) get α = 1.
pub fn suggest_alpha(graph: &NetworkGraph, mu: f64, rho: f64) -> Result<AlphaSuggestion> {
    if !(mu > 0.0) || !(rho >= 0.0) {
        return Err(Error::invalid(format!("need mu > 0 and rho >= 0, got mu={mu}, rho={rho}")));
    }
    let layers = graph.prunable_layers();
    let untrained = layers.iter().all(|&l| graph.layer(l).bn().unwrap().gamma.data().iter().all(|&g| g == 1.0));
    if untrained {
        return Ok(AlphaSuggestion { alpha: 1.0, per_layer: vec![], reason: "untrained network".into() });
    }
    if rho == 0.0 {
        return Ok(AlphaSuggestion { alpha: 1.0, per_layer: vec![], reason: "rho = 0 applies no penalty".into() });
    }
    let mut per_layer = Vec::new();
    for &l in &layers {
        let g = &graph.layer(l).bn().unwrap().gamma;
        let mean_abs = g.l1_norm() / g.numel() as f64;
        if mean_abs == 0.0 {
            continue;
        }
        per_layer.push((l, 100.0 * mu * graph.penalty_lambda(l)? * rho / mean_abs));
    }
    if per_layer.is_empty() {
        return Ok(AlphaSuggestion { alpha: 1.0, per_layer, reason: "every γ layer is all zero".into() });
    }
    let log_mean = per_layer.iter().map(|(_, a)| a.ln()).sum::<f64>() / per_layer.len() as f64;
    let raw = log_mean.exp();
    Ok(AlphaSuggestion { alpha: snap_alpha(raw), per_layer, reason: format!("geometric mean {raw:.3e}") })
}
