//! Differentiable numerical core: logistic regression and a single-layer LSTM
//! with hand-derived backward passes, class-weighted cross-entropy from
//! logits, L1 kernel penalty and inverted dropout.

mod lr;
mod lstm;
mod matrix;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use lr::LrParams;
pub use lstm::{LstmParams, LstmStep, LstmTape};
pub use matrix::Matrix;

/// Logistic function, evaluated on the branch that never exponentiates a
/// positive argument.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Class-weighted binary cross-entropy of a logit.
pub fn weighted_bce_logit(logit: f64, label: f64, weight: f64) -> f64 {
    weight * (softplus(logit) - label * logit)
}

/// Class-weighted binary cross-entropy of a probability. Prefer
/// [`weighted_bce_logit`] when the logit is available.
pub fn weighted_bce(p: f64, label: f64, weight: f64) -> f64 {
    let pos = if label > 0.0 { -label * p.ln() } else { 0.0 };
    let neg = if label < 1.0 { -(1.0 - label) * (-p).ln_1p() } else { 0.0 };
    weight * (pos + neg)
}

/// Derivative of [`weighted_bce_logit`] with respect to the logit.
pub fn weighted_bce_dlogit(logit: f64, label: f64, weight: f64) -> f64 {
    weight * (sigmoid(logit) - label)
}

pub fn l1_penalty(kernel: &[f64], lambda: f64) -> f64 {
    lambda * kernel.iter().map(|w| w.abs()).sum::<f64>()
}

/// `lambda * sign(w)`, with `sign(0) = 0`.
pub fn l1_subgradient(w: f64, lambda: f64) -> f64 {
    if w > 0.0 {
        lambda
    } else if w < 0.0 {
        -lambda
    } else {
        0.0
    }
}

/// A binary classifier trainable by the generic training loop. The same type
/// doubles as its own gradient container.
pub trait Model: Clone + Serialize + DeserializeOwned + Send + Sync {
    type Input: Sync;
    type Tape;

    /// Logit in inference mode (no dropout).
    fn logit(&self, x: &Self::Input) -> Result<f64>;

    /// Training-mode forward pass; `rng` drives the dropout mask.
    fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &Self::Input,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(f64, Self::Tape)>;

    /// Adds `dlogit * d(logit)/d(params)` into `grads`.
    fn backward(&self, x: &Self::Input, tape: &Self::Tape, dlogit: f64, grads: &mut Self);

    fn zeros_like(&self) -> Self;

    /// Sum of absolute values over the L1-regularized kernel weights.
    fn kernel_abs_sum(&self) -> f64;

    /// Adds the L1 subgradient of the kernel weights into `grads`.
    fn add_l1_subgradient(&self, lambda: f64, grads: &mut Self);

    fn slices(&self) -> Vec<&[f64]>;

    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn probability(&self, x: &Self::Input) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Models whose output probability can be differentiated with respect to the
/// (flattened) input, as integrated gradients needs.
pub trait InputGradient {
    type Input;

    /// Output probability and its gradient with respect to every input
    /// element, flattened in row-major order.
    fn probability_and_input_gradient(&self, x: &Self::Input) -> Result<(f64, Vec<f64>)>;
}

/// One training example: input, label in {0, 1}, per-sample loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<I> {
    pub input: I,
    pub label: f64,
    pub weight: f64,
}

/// Mean weighted cross-entropy over the batch plus the L1 penalty.
pub fn batch_loss<M: Model>(model: &M, batch: &[Example<M::Input>], l1_lambda: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        total += weighted_bce_logit(model.logit(&ex.input)?, ex.label, ex.weight);
    }
    let loss = total / batch.len() as f64 + l1_lambda * model.kernel_abs_sum();
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok(loss)
}

/// Exact gradient of [`batch_loss`] (training-mode forward when `dropout > 0`).
/// Returns the loss actually differentiated and the gradient.
pub fn loss_and_gradient<M: Model, R: Rng + ?Sized>(
    model: &M,
    batch: &[Example<M::Input>],
    l1_lambda: f64,
    dropout: f64,
    rng: &mut R,
) -> Result<(f64, M)> {
    let refs: Vec<&Example<M::Input>> = batch.iter().collect();
    loss_and_gradient_refs(model, &refs, l1_lambda, dropout, rng)
}

/// [`loss_and_gradient`] over borrowed examples (minibatches of a larger set).
pub fn loss_and_gradient_refs<M: Model, R: Rng + ?Sized>(
    model: &M,
    batch: &[&Example<M::Input>],
    l1_lambda: f64,
    dropout: f64,
    rng: &mut R,
) -> Result<(f64, M)> {
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads = model.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        let (logit, tape) = model.forward_train(&ex.input, dropout, rng)?;
        total += weighted_bce_logit(logit, ex.label, ex.weight);
        let dlogit = weighted_bce_dlogit(logit, ex.label, ex.weight) / n;
        model.backward(&ex.input, &tape, dlogit, &mut grads);
    }
    model.add_l1_subgradient(l1_lambda, &mut grads);
    let loss = total / n + l1_lambda * model.kernel_abs_sum();
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(20.0) - 1.0 / (1.0 + (-20.0f64).exp())).abs() < 1e-16);
        assert!(sigmoid(-50.0) > 0.0);
        assert!((sigmoid(-1.7) - (1.0 - sigmoid(1.7))).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn bce_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((weighted_bce(0.5, 1.0, 1.0) - ln2).abs() < 1e-15);
        assert!((weighted_bce_logit(0.0, 1.0, 1.0) - ln2).abs() < 1e-15);
        assert!(weighted_bce(1e-300, 0.0, 1.0) < 1e-299);
        assert!(weighted_bce_logit(-700.0, 0.0, 1.0) < 1e-300);
        for &(z, y) in &[(-3.0, 0.0), (0.4, 1.0), (2.5, 0.0)] {
            let one = weighted_bce_logit(z, y, 1.0);
            assert!((weighted_bce_logit(z, y, 2.0) - 2.0 * one).abs() < 1e-15);
            assert!((weighted_bce(sigmoid(z), y, 1.0) - one).abs() < 1e-12);
        }
        // large logits stay finite and exact
        assert!((weighted_bce_logit(800.0, 0.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn l1_values() {
        assert!((l1_penalty(&[3.0, -4.0], 0.1) - 0.7).abs() < 1e-15);
        assert_eq!(l1_penalty(&[3.0, -4.0], 0.0), 0.0);
        assert_eq!(l1_subgradient(0.0, 0.5), 0.0);
        assert_eq!(l1_subgradient(-2.0, 0.5), -0.5);
    }
}
