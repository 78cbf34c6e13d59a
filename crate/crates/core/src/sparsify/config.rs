use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the γ vectors of prunable layers are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaUpdate {
    /// Gradient step followed by soft thresholding with `mu * rho * lambda`.
    #[default]
    Ista,
    /// Plain gradient step, no penalty (baseline and fine-tuning).
    Sgd,
}

/// Hyper-parameters of sparsified training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IstaConfig {
    /// Global sparsity penalty after the warm-up phase.
    pub rho: f64,
    /// Penalty used during the first `warm_steps` steps, if set.
    pub rho_warm: Option<f64>,
    pub warm_steps: usize,
    /// γ-W rescaling factor applied before training and undone after pruning.
    pub alpha: f64,
    /// Initial learning rate.
    pub mu0: f64,
    /// Multiply the learning rate by `lr_decay_rate` every `lr_decay_steps` steps (0 = constant).
    pub lr_decay_rate: f64,
    pub lr_decay_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Stop once loss, sparsity and Lasso term all changed by less than
    /// `plateau_tol` (relative) over the last `plateau_window` epochs.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub stop_on_plateau: bool,
    /// SGD momentum for non-γ parameters (0 = plain SGD).
    pub momentum: f64,
    /// Decay of the parameter moving average used for the returned model; `None` disables it.
    pub ema_decay: Option<f64>,
    pub gamma_update: GammaUpdate,
}

impl Default for IstaConfig {
    fn default() -> Self {
        IstaConfig {
            rho: 0.0,
            rho_warm: None,
            warm_steps: 0,
            alpha: 1.0,
            mu0: 0.01,
            lr_decay_rate: 1.0,
            lr_decay_steps: 0,
            batch_size: 64,
            max_steps: 1000,
            plateau_window: 5,
            plateau_tol: 1e-3,
            stop_on_plateau: false,
            momentum: 0.0,
            ema_decay: Some(0.999),
            gamma_update: GammaUpdate::Ista,
        }
    }
}

impl IstaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        if let Some(w) = self.rho_warm {
            if !(w >= 0.0) || !w.is_finite() {
                return bad(format!("rho_warm must be >= 0, got {w}"));
            }
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.mu0 > 0.0) || !self.mu0.is_finite() {
            return bad(format!("mu0 must be > 0, got {}", self.mu0));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) {
            return bad(format!("lr_decay_rate must be in (0, 1], got {}", self.lr_decay_rate));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return bad("batch_size and max_steps must be positive".into());
        }
        if self.plateau_window < 2 || !(self.plateau_tol > 0.0) {
            return bad("plateau_window must be >= 2 and plateau_tol > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("ema_decay must be in [0, 1), got {d}"));
            }
        }
        Ok(())
    }

    /// Penalty in effect at `step` (0-based).
    pub fn rho_at(&self, step: usize) -> f64 {
        match self.rho_warm {
            Some(w) if step < self.warm_steps => w,
            _ => self.rho,
        }
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_decay_steps == 0 {
            return self.mu0;
        }
        self.mu0 * self.lr_decay_rate.powi((step / self.lr_decay_steps) as i32)
    }
}
