//! Integrated gradients for differentiable scorers, weight ranking for the
//! logistic regression, and per-feature aggregation of sequence attributions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::SequenceInput;
use crate::nnet::{InputGradient, LrParams, Matrix};

pub const DEFAULT_IG_STEPS: usize = 128;

/// Inputs that can be viewed as a flat vector and rebuilt from one.
pub trait FlatInput: Sized {
    fn flat(&self) -> Vec<f64>;
    fn with_flat(&self, values: &[f64]) -> Result<Self>;
}

impl FlatInput for Vec<f64> {
    fn flat(&self) -> Vec<f64> {
        self.clone()
    }

    fn with_flat(&self, values: &[f64]) -> Result<Self> {
        Ok(values.to_vec())
    }
}

impl FlatInput for SequenceInput {
    fn flat(&self) -> Vec<f64> {
        self.steps.data().to_vec()
    }

    fn with_flat(&self, values: &[f64]) -> Result<Self> {
        Ok(SequenceInput {
            steps: Matrix::from_vec(self.steps.rows(), self.steps.cols(), values.to_vec())?,
            pad_count: self.pad_count,
        })
    }
}

/// `(x_i - x'_i)` times the midpoint-rule average of `df/dx_i` over
/// `x' + ((k - 1/2) / m)(x - x')`, `k = 1..=m`. `f` is the output probability.
pub fn integrated_gradients<M, I>(model: &M, input: &I, baseline: &I, steps: usize) -> Result<Vec<f64>>
where
    M: InputGradient<Input = I>,
    I: FlatInput,
{
    if steps == 0 {
        return Err(Error::InvalidConfig("integrated gradients needs at least one step".into()));
    }
    let x = input.flat();
    let base = baseline.flat();
    if x.len() != base.len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} elements, baseline {}",
            x.len(),
            base.len()
        )));
    }
    let diff: Vec<f64> = x.iter().zip(&base).map(|(a, b)| a - b).collect();
    let mut total = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for k in 1..=steps {
        let alpha = (k as f64 - 0.5) / steps as f64;
        for ((p, b), d) in point.iter_mut().zip(&base).zip(&diff) {
            *p = b + alpha * d;
        }
        let (_, grad) = model.probability_and_input_gradient(&input.with_flat(&point)?)?;
        if grad.len() != total.len() {
            return Err(Error::ShapeMismatch("gradient length differs from input".into()));
        }
        for (t, g) in total.iter_mut().zip(&grad) {
            *t += g;
        }
    }
    let attributions: Vec<f64> = total
        .iter()
        .zip(&diff)
        .map(|(g, d)| if *d == 0.0 { 0.0 } else { d * g / steps as f64 })
        .collect();
    if attributions.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("attributions".into()));
    }
    Ok(attributions)
}

/// `|sum(attributions) - (f(x) - f(baseline))|`.
pub fn completeness_gap<M, I>(model: &M, input: &I, baseline: &I, steps: usize) -> Result<f64>
where
    M: InputGradient<Input = I>,
    I: FlatInput,
{
    let ig = integrated_gradients(model, input, baseline, steps)?;
    let (fx, _) = model.probability_and_input_gradient(input)?;
    let (fb, _) = model.probability_and_input_gradient(baseline)?;
    Ok((ig.iter().sum::<f64>() - (fx - fb)).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub rank: usize,
    pub feature: String,
    pub score: f64,
}

/// Sorts by descending `|score|`; ties keep column order. Ranks start at 1.
pub fn rank_scores(names: &[String], scores: &[f64], k: usize) -> Result<Vec<RankedFeature>> {
    if names.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} names, {} scores",
            names.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()));
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, i)| RankedFeature {
            rank: r + 1,
            feature: names[i].clone(),
            score: scores[i],
        })
        .collect())
}

/// Top `k` logistic regression weights by magnitude (all of them if `k > F`).
pub fn rank_lr_weights(model: &LrParams, names: &[String], k: usize) -> Result<Vec<RankedFeature>> {
    rank_scores(names, &model.w, k)
}

/// Per-feature sums over timesteps of a flattened `T x F` attribution tensor.
pub fn aggregate_sequence_attributions(attributions: &[f64], features: usize) -> Result<Vec<f64>> {
    if features == 0 || attributions.len() % features != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} attributions do not tile rows of {features}",
            attributions.len()
        )));
    }
    let mut totals = vec![0.0; features];
    for row in attributions.chunks(features) {
        for (t, a) in totals.iter_mut().zip(row) {
            *t += a;
        }
    }
    Ok(totals)
}

/// Signed attributions averaged over a population of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationAttribution {
    pub samples: usize,
    /// `T x F` mean signed attribution.
    pub per_step: Matrix,
    /// Per-feature mean signed attribution summed over timesteps.
    pub totals: Vec<f64>,
    pub max_completeness_gap: f64,
}

/// Mean integrated gradients against the all-zero baseline.
pub fn population_attributions<M>(model: &M, inputs: &[SequenceInput], steps: usize) -> Result<PopulationAttribution>
where
    M: InputGradient<Input = SequenceInput>,
{
    let first = inputs
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no inputs to attribute".into()))?;
    let (t, f) = (first.steps.rows(), first.steps.cols());
    let mut sum = vec![0.0; t * f];
    let mut max_gap: f64 = 0.0;
    for x in inputs {
        let baseline = SequenceInput {
            steps: Matrix::zeros(x.steps.rows(), x.steps.cols()),
            pad_count: x.pad_count,
        };
        let ig = integrated_gradients(model, x, &baseline, steps)?;
        if ig.len() != sum.len() {
            return Err(Error::ShapeMismatch("inputs differ in shape".into()));
        }
        let (fx, _) = model.probability_and_input_gradient(x)?;
        let (fb, _) = model.probability_and_input_gradient(&baseline)?;
        max_gap = max_gap.max((ig.iter().sum::<f64>() - (fx - fb)).abs());
        for (s, a) in sum.iter_mut().zip(&ig) {
            *s += a;
        }
    }
    let n = inputs.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    let totals = aggregate_sequence_attributions(&sum, f)?;
    Ok(PopulationAttribution {
        samples: inputs.len(),
        per_step: Matrix::from_vec(t, f, sum)?,
        totals,
        max_completeness_gap: max_gap,
    })
}

/// `feature,timestep,score`, timesteps oldest first.
pub fn write_step_attributions<W: Write>(writer: W, names: &[String], per_step: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "timestep", "score"])?;
    for (f, name) in names.iter().enumerate() {
        for t in 0..per_step.rows() {
            w.write_record([name.clone(), t.to_string(), per_step.get(t, f).to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<attribution export>", e))?;
    Ok(())
}

/// `feature,total_score,rank` in rank order.
pub fn write_ranked<W: Write>(writer: W, ranked: &[RankedFeature]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "total_score", "rank"])?;
    for r in ranked {
        w.write_record([r.feature.clone(), r.score.to_string(), r.rank.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<attribution export>", e))?;
    Ok(())
}
