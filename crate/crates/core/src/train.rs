//! Optimizers, class weighting, the epoch loop with validation early stopping,
//! and exhaustive grid search.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nnet::{batch_loss, loss_and_gradient_refs, Example, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lr,
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(ModelKind::Lr),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(Error::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(Error::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub l1_lambda: f64,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_delta: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Adam at `learning_rate` until the first early stop, then Adam again at
    /// `second_learning_rate` with fresh moments.
    pub two_phase: bool,
    pub second_learning_rate: f64,
}

pub const LR_MAX_EPOCHS: usize = 500;
pub const LSTM_MAX_EPOCHS: usize = 250;
pub const EARLY_STOP_DELTA: f64 = 1e-7;

impl TrainConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Lr => TrainConfig {
                model_kind: kind,
                optimizer: OptimizerKind::Adam,
                learning_rate: 1e-3,
                l1_lambda: 1e-3,
                hidden_size: 0,
                batch_size: 256,
                max_epochs: LR_MAX_EPOCHS,
                early_stop_delta: EARLY_STOP_DELTA,
                dropout: 0.0,
                seed: 0,
                two_phase: false,
                second_learning_rate: 1e-5,
            },
            ModelKind::Lstm => TrainConfig {
                model_kind: kind,
                optimizer: OptimizerKind::Rmsprop,
                learning_rate: 1e-3,
                l1_lambda: 1e-5,
                hidden_size: 120,
                batch_size: 256,
                max_epochs: LSTM_MAX_EPOCHS,
                early_stop_delta: EARLY_STOP_DELTA,
                dropout: 0.2,
                seed: 0,
                two_phase: false,
                second_learning_rate: 1e-5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.two_phase && !(self.second_learning_rate > 0.0 && self.second_learning_rate.is_finite()) {
            return bad("second_learning_rate must be positive");
        }
        if !(self.l1_lambda >= 0.0 && self.l1_lambda.is_finite()) {
            return bad("l1_lambda must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(self.early_stop_delta >= 0.0) {
            return bad("early_stop_delta must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.model_kind == ModelKind::Lstm && self.hidden_size == 0 {
            return bad("hidden_size must be positive for lstm");
        }
        Ok(())
    }

    /// Parses flat `key=value` lines over the defaults of `model_kind` (or
    /// `lr` when the text names none). Blank lines and `#` comments are ignored.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let kind = pairs
            .iter()
            .find(|(k, _)| k == "model_kind")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(ModelKind::Lr);
        let mut cfg = TrainConfig::default_for(kind);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model_kind" => self.model_kind = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "l1_lambda" => self.l1_lambda = parse_value(key, value)?,
            "hidden_size" => self.hidden_size = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "early_stop_delta" => self.early_stop_delta = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "two_phase" => self.two_phase = parse_value(key, value)?,
            "second_learning_rate" => self.second_learning_rate = parse_value(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "model_kind={}\noptimizer={}\nlearning_rate={}\nl1_lambda={}\nhidden_size={}\n\
             batch_size={}\nmax_epochs={}\nearly_stop_delta={}\ndropout={}\nseed={}\n\
             two_phase={}\nsecond_learning_rate={}\n",
            self.model_kind.name(),
            self.optimizer.name(),
            self.learning_rate,
            self.l1_lambda,
            self.hidden_size,
            self.batch_size,
            self.max_epochs,
            self.early_stop_delta,
            self.dropout,
            self.seed,
            self.two_phase,
            self.second_learning_rate,
        )
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

/// Hyperparameter grid; expanded in declaration order
/// (learning rate, then l1, then hidden size, then batch size, outermost first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub learning_rates: Vec<f64>,
    pub l1_lambdas: Vec<f64>,
    pub hidden_sizes: Vec<usize>,
    pub batch_sizes: Vec<usize>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        SearchGrid {
            learning_rates: vec![1e-5, 1e-4, 1e-3],
            l1_lambdas: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            hidden_sizes: vec![6, 12, 80, 120],
            batch_sizes: vec![128, 256, 512, 1024],
        }
    }
}

impl SearchGrid {
    /// The single-point grid of `base`.
    pub fn single(base: &TrainConfig) -> Self {
        SearchGrid {
            learning_rates: vec![base.learning_rate],
            l1_lambdas: vec![base.l1_lambda],
            hidden_sizes: vec![base.hidden_size],
            batch_sizes: vec![base.batch_size],
        }
    }

    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let hidden: Vec<usize> = if base.model_kind == ModelKind::Lr {
            vec![base.hidden_size]
        } else {
            self.hidden_sizes.clone()
        };
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &l1 in &self.l1_lambdas {
                for &h in &hidden {
                    for &b in &self.batch_sizes {
                        out.push(TrainConfig {
                            learning_rate: lr,
                            l1_lambda: l1,
                            hidden_size: h,
                            batch_size: b,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Per-class loss weights `w_c = N / (2 N_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub controlled: f64,
    pub uncontrolled: f64,
}

impl ClassWeights {
    pub fn weight(&self, label: f64) -> f64 {
        if label >= 0.5 {
            self.uncontrolled
        } else {
            self.controlled
        }
    }
}

pub fn class_weights(labels: &[f64]) -> Result<ClassWeights> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y >= 0.5).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::SingleClass(format!(
            "{} controlled, {} uncontrolled",
            neg as usize, pos as usize
        )));
    }
    Ok(ClassWeights {
        controlled: n / (2.0 * neg),
        uncontrolled: n / (2.0 * pos),
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_RHO: f64 = 0.9;
pub const OPTIMIZER_EPS: f64 = 1e-8;

/// Moment accumulators over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        OptimizerState {
            kind,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    /// Applies one update to a model; parameters and gradients are walked in
    /// the same flattened order.
    pub fn apply<M: Model>(&mut self, params: &mut M, grads: &M, lr: f64) -> Result<()> {
        let g: Vec<f64> = grads.slices().concat();
        let mut flat: Vec<f64> = params.slices().concat();
        match self.kind {
            OptimizerKind::Adam => adam_step(&mut flat, &g, self, lr)?,
            OptimizerKind::Rmsprop => rmsprop_step(&mut flat, &g, self, lr)?,
        }
        let mut offset = 0;
        for s in params.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

fn check_step(params: &[f64], grads: &[f64], state: &OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64) -> Result<()> {
    check_step(params, grads, state)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + OPTIMIZER_EPS);
    }
    Ok(())
}

/// RMSProp: `p -= lr g / sqrt(E[g^2] + eps)`.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64) -> Result<()> {
    check_step(params, grads, state)?;
    state.step += 1;
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        let v = &mut state.second[i];
        *v = RMSPROP_RHO * *v + (1.0 - RMSPROP_RHO) * g * g;
        *p -= lr * g / (*v + OPTIMIZER_EPS).sqrt();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "val_loss", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                format!("{:.3}", e.seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<train log>", e))?;
        Ok(())
    }
}

/// Minibatch training with per-epoch shuffling and validation early stopping.
///
/// Epoch `e` shuffles with a seed derived from `(config.seed, e)`; the dropout
/// stream of each minibatch is likewise derived from `(seed, e, batch)`. The
/// run stops once the validation loss improves by no more than
/// `early_stop_delta` over the previous epoch, or at `max_epochs`. The
/// parameters of the last completed epoch are returned.
pub fn train_model<M: Model>(
    init: M,
    config: &TrainConfig,
    train: &[Example<M::Input>],
    validation: &[Example<M::Input>],
) -> Result<(M, TrainLog)> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::EmptyCohort(" (empty training or validation set)"));
    }
    let mut model = init;
    let dropout = if config.model_kind == ModelKind::Lstm { config.dropout } else { 0.0 };
    let (mut optimizer_kind, mut lr) = if config.two_phase {
        (OptimizerKind::Adam, config.learning_rate)
    } else {
        (config.optimizer, config.learning_rate)
    };
    let mut second_phase = false;
    let mut state = OptimizerState::new(optimizer_kind, model.num_params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut prev_val: Option<f64> = None;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("shuffle:{epoch}")));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example<M::Input>> = chunk.iter().map(|&i| &train[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("dropout:{epoch}:{b}")));
            let (_, grads) = loss_and_gradient_refs(&model, &batch, config.l1_lambda, dropout, &mut rng)?;
            state.apply(&mut model, &grads, lr)?;
        }
        let val_loss = match batch_loss(&model, validation, config.l1_lambda) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let train_loss = batch_loss(&model, train, config.l1_lambda)
            .map_err(|_| Error::Divergence { epoch, loss: f64::NAN })?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        let stalled = prev_val.is_some_and(|p| p - val_loss <= config.early_stop_delta);
        prev_val = Some(val_loss);
        if stalled {
            if config.two_phase && !second_phase {
                second_phase = true;
                optimizer_kind = OptimizerKind::Adam;
                lr = config.second_learning_rate;
                state = OptimizerState::new(optimizer_kind, model.num_params());
                continue;
            }
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    Ok((model, TrainLog { epochs, stop_reason }))
}

/// Outcome of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub config: TrainConfig,
    pub validation_auroc: f64,
}

/// Runs `fit` (which trains and returns validation AUROC) on every config and
/// returns the best. Ties go to the smaller hidden size, then the smaller l1,
/// then the earlier config.
pub fn grid_search<F>(configs: &[TrainConfig], mut fit: F) -> Result<(usize, Vec<GridResult>)>
where
    F: FnMut(&TrainConfig) -> Result<f64>,
{
    if configs.is_empty() {
        return Err(Error::InvalidConfig("empty search grid".into()));
    }
    let mut results = Vec::with_capacity(configs.len());
    for c in configs {
        results.push(GridResult {
            config: c.clone(),
            validation_auroc: fit(c)?,
        });
    }
    let best = select_best(&results);
    Ok((best, results))
}

fn select_best(results: &[GridResult]) -> usize {
    let mut best = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        let b = &results[best];
        let better = if r.validation_auroc != b.validation_auroc {
            r.validation_auroc > b.validation_auroc
        } else if r.config.hidden_size != b.config.hidden_size {
            r.config.hidden_size < b.config.hidden_size
        } else {
            r.config.l1_lambda < b.config.l1_lambda
        };
        if better {
            best = i;
        }
    }
    best
}
