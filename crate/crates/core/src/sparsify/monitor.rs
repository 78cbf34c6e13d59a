//! Per-epoch convergence quantities and the tuning-failure detectors.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{LayerId, NetworkGraph};

/// γ vectors of the prunable layers together with their penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaState {
    pub layers: Vec<GammaLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaLayer {
    pub layer: LayerId,
    pub name: String,
    pub lambda: f64,
    pub gamma: Vec<f64>,
}

impl GammaState {
    pub fn capture(graph: &NetworkGraph) -> Result<Self> {
        let layers = graph
            .prunable_layers()
            .into_iter()
            .map(|l| {
                Ok(GammaLayer {
                    layer: l,
                    name: graph.layer(l).name().to_string(),
                    lambda: graph.penalty_lambda(l)?,
                    gamma: graph.layer(l).bn().expect("prunable layers carry batch norm").gamma.data().to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(GammaState { layers })
    }

    /// Effective ISTA threshold `mu * rho * lambda` of each layer.
    pub fn etas(&self, mu: f64, rho: f64) -> Vec<(LayerId, f64)> {
        self.layers.iter().map(|g| (g.layer, mu * rho * g.lambda)).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|g| g.gamma.len()).sum()
    }

    /// Entries that are exactly zero (no thresholding).
    pub fn zero_count(&self) -> usize {
        self.layers.iter().map(|g| g.gamma.iter().filter(|&&v| v == 0.0).count()).sum()
    }

    pub fn zero_mask(&self, layer: LayerId) -> Option<Vec<bool>> {
        self.layers.iter().find(|g| g.layer == layer).map(|g| g.gamma.iter().map(|&v| v == 0.0).collect())
    }

    pub fn sparsity(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.zero_count() as f64 / t as f64
        }
    }

    /// `rho * Σ_l λ^l ‖γ^l‖₁`.
    pub fn lasso(&self, rho: f64) -> f64 {
        rho * self.layers.iter().map(|g| g.lambda * g.gamma.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>()
    }
}

/// One row of the monitor history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's batches.
    pub loss: f64,
    /// Fraction of prunable γ entries that are exactly zero at epoch end.
    pub sparsity_fraction: f64,
    /// `rho * Σ λ^l ‖γ^l‖₁` at epoch end.
    pub lasso_term: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMonitor {
    pub num_classes: usize,
    pub window: usize,
    pub tol: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainMonitor {
    pub fn new(num_classes: usize, window: usize, tol: f64) -> Self {
        TrainMonitor { num_classes, window, tol, history: Vec::new() }
    }

    pub fn record(&mut self, r: EpochRecord) {
        self.history.push(r);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.history.last()
    }

    /// True when each of loss, sparsity and Lasso term varied by less than
    /// `tol` relative to its latest value over the last `window` epochs.
    pub fn plateaued(&self) -> bool {
        let n = self.history.len();
        if n < self.window {
            return false;
        }
        let recent = &self.history[n - self.window..];
        let quantities: [fn(&EpochRecord) -> f64; 3] = [|r| r.loss, |r| r.sparsity_fraction, |r| r.lasso_term];
        quantities.iter().all(|q| {
            let vals: Vec<f64> = recent.iter().map(q).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let scale = vals.last().unwrap().abs().max(1e-12);
            (hi - lo) / scale < self.tol
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,sparsity_fraction,lasso_term,lr\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.loss, r.sparsity_fraction, r.lasso_term, r.lr));
        }
        s
    }
}

/// The three tuning failures and the remedy for each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// Lasso term falls linearly while sparsity stays near zero.
    DecreaseAlpha,
    /// Sparsity jumps to ~100% within the first epochs.
    DecreaseRho,
    /// Cross-entropy stuck at or climbing to chance level, or non-finite.
    DecreaseMuOrRho,
}

impl Warning {
    pub fn message(self) -> &'static str {
        match self {
            Warning::DecreaseAlpha => {
                "Lasso term keeps decreasing linearly while γ sparsity stays near zero: decrease alpha and restart"
            }
            Warning::DecreaseRho => "γ sparsity rose to ~100% within the first epochs: decrease rho",
            Warning::DecreaseMuOrRho => {
                "cross-entropy is stuck at or rising to a non-informative level: decrease the learning rate or rho"
            }
        }
    }
}

/// Number of leading epochs the detectors look at.
pub const EARLY_EPOCHS: usize = 5;
/// Sparsity at or below this counts as "near zero".
pub const NEAR_ZERO_SPARSITY: f64 = 0.01;
/// Sparsity at or above this counts as "100%".
pub const FULL_SPARSITY: f64 = 0.99;
/// Loss at or above this fraction of ln(C) counts as non-informative.
pub const CHANCE_FRACTION: f64 = 0.9;

/// Checks the first epochs of a history for the three failure patterns.
/// Needs at least two epochs; shorter histories yield no warnings.
pub fn diagnose(monitor: &TrainMonitor) -> Vec<Warning> {
    let h = &monitor.history;
    if h.len() < 2 {
        return vec![];
    }
    let early = &h[..h.len().min(EARLY_EPOCHS)];
    let mut out = Vec::new();

    let lasso: Vec<f64> = early.iter().map(|r| r.lasso_term).collect();
    let steps: Vec<f64> = lasso.windows(2).map(|w| w[1] - w[0]).collect();
    let mean_step = steps.iter().sum::<f64>() / steps.len() as f64;
    let decreasing = steps.iter().all(|&d| d < 0.0);
    let linear = steps.iter().all(|&d| (d - mean_step).abs() <= 0.25 * mean_step.abs());
    let sparse_near_zero = early.iter().all(|r| r.sparsity_fraction <= NEAR_ZERO_SPARSITY);
    if decreasing && linear && sparse_near_zero {
        out.push(Warning::DecreaseAlpha);
    }

    if early.iter().any(|r| r.sparsity_fraction >= FULL_SPARSITY) {
        out.push(Warning::DecreaseRho);
    }

    let chance = CHANCE_FRACTION * (monitor.num_classes.max(2) as f64).ln();
    let losses: Vec<f64> = early.iter().map(|r| r.loss).collect();
    let last = *losses.last().unwrap();
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let non_finite = losses.iter().any(|l| !l.is_finite());
    if non_finite || last >= chance || last >= 2.0 * best {
        out.push(Warning::DecreaseMuOrRho);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monitor(rows: &[(f64, f64, f64)]) -> TrainMonitor {
        let mut m = TrainMonitor::new(10, 3, 1e-3);
        for (i, &(loss, sp, lasso)) in rows.iter().enumerate() {
            m.record(EpochRecord { epoch: i, loss, sparsity_fraction: sp, lasso_term: lasso, lr: 0.01 });
        }
        m
    }

    #[test]
    fn plateau_detection() {
        let m = monitor(&[(1.0, 0.2, 5.0), (0.5, 0.4, 3.0), (0.3, 0.5, 2.0), (0.3, 0.5, 2.0), (0.3, 0.5, 2.0)]);
        assert!(m.plateaued());
        let m = monitor(&[(1.0, 0.2, 5.0), (0.5, 0.4, 3.0), (0.3, 0.5, 2.0)]);
        assert!(!m.plateaued());
        // sparsity 0 throughout counts as converged
        let m = monitor(&[(0.3, 0.0, 0.0), (0.3, 0.0, 0.0), (0.3, 0.0, 0.0)]);
        assert!(m.plateaued());
    }

    #[test]
    fn csv_layout() {
        let m = monitor(&[(1.5, 0.25, 2.0)]);
        assert_eq!(m.to_csv(), "epoch,loss,sparsity_fraction,lasso_term,lr\n0,1.5,0.25,2,0.01\n");
    }

    #[test]
    fn diagnose_patterns() {
        let healthy =
            monitor(&[(1.2, 0.0, 4.0), (0.6, 0.1, 2.5), (0.4, 0.3, 1.8), (0.35, 0.4, 1.6), (0.34, 0.42, 1.55)]);
        assert!(diagnose(&healthy).is_empty());
        let a = monitor(&[(1.2, 0.0, 4.0), (0.6, 0.0, 3.5), (0.4, 0.0, 3.0), (0.35, 0.0, 2.5), (0.34, 0.0, 2.0)]);
        assert_eq!(diagnose(&a), vec![Warning::DecreaseAlpha]);
        let b = monitor(&[(1.2, 1.0, 0.1), (0.6, 1.0, 0.0), (0.4, 1.0, 0.0)]);
        assert_eq!(diagnose(&b), vec![Warning::DecreaseRho]);
        let c = monitor(&[(1.2, 0.0, 4.0), (2.2, 0.1, 2.5), (2.3, 0.3, 1.8)]);
        assert_eq!(diagnose(&c), vec![Warning::DecreaseMuOrRho]);
        assert!(diagnose(&monitor(&[(1.0, 0.0, 1.0)])).is_empty());
    }
}
