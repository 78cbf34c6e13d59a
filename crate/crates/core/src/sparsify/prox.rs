//! Soft thresholding and the ISTA update on a γ vector.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `max(|x| - eta, 0) * sgn(x)`; every `|x| <= eta` maps to bitwise `0.0`.
#[inline]
pub fn prox_scalar(x: f64, eta: f64) -> f64 {
    if x.abs() <= eta {
        0.0
    } else if x > 0.0 {
        x - eta
    } else {
        x + eta
    }
}

/// Elementwise soft thresholding.
pub fn prox(x: &Tensor, eta: f64) -> Result<Tensor> {
    if !(eta >= 0.0) {
        return Err(Error::invalid(format!("prox threshold must be >= 0, got {eta}")));
    }
    Ok(x.map(|v| prox_scalar(v, eta)))
}

/// One ISTA step: `prox(gamma - mu * grad, mu * rho * lambda)`.
///
/// A gradient with a non-finite entry rejects the step rather than poisoning γ.
pub fn ista_step(gamma: &Tensor, grad: &Tensor, mu: f64, lambda: f64, rho: f64) -> Result<Tensor> {
    if gamma.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "γ has shape {:?} but its gradient has shape {:?}",
            gamma.shape(),
            grad.shape()
        )));
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive and finite, got {mu}")));
    }
    if !(lambda >= 0.0) || !(rho >= 0.0) {
        return Err(Error::invalid(format!("penalty must be >= 0, got lambda={lambda}, rho={rho}")));
    }
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("γ gradient entry {i} is {}", grad.data()[i])));
    }
    let eta = mu * rho * lambda;
    gamma.zip_with(grad, |g, d| prox_scalar(g - mu * d, eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert!((prox_scalar(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(prox_scalar(-0.3, 0.5).to_bits(), 0.0f64.to_bits());
        assert_eq!(prox_scalar(-1.5, 0.5), -1.0);
        assert_eq!(prox_scalar(0.37, 0.0), 0.37);
        assert!(prox(&Tensor::from_vec(vec![1.0]), -0.1).is_err());
    }

    #[test]
    fn ista_examples() {
        let g = Tensor::from_vec(vec![0.5, 0.05]);
        let zero = Tensor::zeros(&[2]);
        let out = ista_step(&g, &zero, 0.1, 1.0, 1.0).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(out.data()[1].to_bits(), 0.0f64.to_bits());
        let bad = Tensor::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(ista_step(&g, &bad, 0.1, 1.0, 1.0), Err(Error::NonFinite(_))));
        assert!(ista_step(&g, &zero, 0.0, 1.0, 1.0).is_err());
    }
}
