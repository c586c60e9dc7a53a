use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{l1_subgradient, sigmoid, InputGradient, Model};
use crate::error::{Error, Result};

/// Logistic regression: `p = sigmoid(w . x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LrParams {
    pub fn zeros(features: usize) -> Self {
        LrParams {
            w: vec![0.0; features],
            b: 0.0,
        }
    }

    pub fn features(&self) -> usize {
        self.w.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.w.len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.w.len()
            )));
        }
        Ok(())
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.probability(x)).collect()
    }
}

impl Model for LrParams {
    type Input = Vec<f64>;
    type Tape = ();

    fn logit(&self, x: &Vec<f64>) -> Result<f64> {
        self.check(x)?;
        let z = self.b + self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        if !z.is_finite() {
            return Err(Error::NonFinite("logistic regression logit".into()));
        }
        Ok(z)
    }

    fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &Vec<f64>,
        _dropout: f64,
        _rng: &mut R,
    ) -> Result<(f64, ())> {
        Ok((self.logit(x)?, ()))
    }

    fn backward(&self, x: &Vec<f64>, _tape: &(), dlogit: f64, grads: &mut Self) {
        for (g, xi) in grads.w.iter_mut().zip(x) {
            *g += dlogit * xi;
        }
        grads.b += dlogit;
    }

    fn zeros_like(&self) -> Self {
        LrParams::zeros(self.w.len())
    }

    fn kernel_abs_sum(&self) -> f64 {
        self.w.iter().map(|w| w.abs()).sum()
    }

    fn add_l1_subgradient(&self, lambda: f64, grads: &mut Self) {
        if lambda == 0.0 {
            return;
        }
        for (g, w) in grads.w.iter_mut().zip(&self.w) {
            *g += l1_subgradient(*w, lambda);
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        vec![&self.w, std::slice::from_ref(&self.b)]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w, std::slice::from_mut(&mut self.b)]
    }
}

impl InputGradient for LrParams {
    type Input = Vec<f64>;

    fn probability_and_input_gradient(&self, x: &Vec<f64>) -> Result<(f64, Vec<f64>)> {
        let p = sigmoid(self.logit(x)?);
        let s = p * (1.0 - p);
        Ok((p, self.w.iter().map(|w| s * w).collect()))
    }
}
