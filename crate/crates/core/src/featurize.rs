//! Train-split feature statistics and the transforms that turn cohort samples
//! into fixed-width vectors (logistic regression) and fixed-length sequences
//! (LSTM).
//!
//! Every numeric variable is mean-imputed, min-max scaled with training-split
//! bounds, and paired with a `_missing` indicator column. Categorical
//! demographics become one-hot blocks plus a missing indicator; medication
//! categories, lab panels and diagnosis codes become binary indicators.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{compute_bp_fraction, encounter_status, CohortSample};
use crate::ehr::{Encounter, MedicationCategory, Sex, DEMOGRAPHIC_COLUMNS, VITAL_COLUMNS};
use crate::error::{Error, Result};
use crate::nnet::Matrix;

pub const SCHEMA_VERSION: u32 = 1;
/// Visits fed to the LSTM.
pub const SEQUENCE_LENGTH: usize = 6;
/// Blood-pressure lags in the logistic regression input.
pub const LR_LAGS: usize = 7;
/// Variables missing in more than this fraction of training records are dropped.
pub const MAX_MISSING_RATE: f64 = 0.99;
/// Lab panels ordered in fewer than this fraction of training records are dropped.
pub const MIN_LAB_FREQUENCY: f64 = 0.60;

/// Encounter-level numeric variables, in column order.
pub fn numeric_variables() -> Vec<&'static str> {
    let mut v = vec!["systolic", "diastolic", "bp_fraction", "bp_status"];
    v.extend(VITAL_COLUMNS);
    v.extend(["age", "days_since_prev"]);
    v
}

/// Numerics that describe blood pressure; the logistic regression input
/// carries them as explicit lags instead.
const BP_VARIABLES: [&str; 4] = ["systolic", "diastolic", "bp_fraction", "bp_status"];
/// Numerics that must survive the missingness rule.
const REQUIRED_VARIABLES: [&str; 2] = ["systolic", "diastolic"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStat {
    pub name: String,
    pub train_min: f64,
    pub train_max: f64,
    pub train_mean: f64,
    pub missing_rate: f64,
    pub observed: usize,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVocab {
    pub name: String,
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorStat {
    pub name: String,
    pub frequency: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    /// Clamp scaled values to [0, 1] (off by default so unseen extremes keep
    /// their ordering).
    pub clamp: bool,
    pub train_records: usize,
    pub numerics: Vec<NumericStat>,
    /// Sample-level numeric: days from the last visit to the target date.
    pub time_to_target: NumericStat,
    pub categoricals: Vec<CategoricalVocab>,
    pub labs: Vec<IndicatorStat>,
    pub diagnoses: Vec<IndicatorStat>,
    /// Per-encounter feature columns (the LSTM step width F).
    pub columns: Vec<String>,
    /// Logistic regression input columns.
    pub lr_columns: Vec<String>,
}

/// Fixed-length visit sequence, oldest first; the first `pad_count` rows are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInput {
    pub steps: Matrix,
    pub pad_count: usize,
}

fn numeric_value(history: &[Encounter], j: usize, name: &str) -> Option<f64> {
    let e = &history[j];
    let r = &e.record;
    match name {
        "systolic" => r.systolic,
        "diastolic" => r.diastolic,
        "bp_fraction" => compute_bp_fraction(r.systolic, r.diastolic),
        "bp_status" => encounter_status(e).map(|s| s.as_f64()),
        "age" => Some(r.age),
        "days_since_prev" => {
            (j > 0).then(|| (r.date - history[j - 1].date()).num_days() as f64)
        }
        vital => r.vital(vital),
    }
}

fn time_to_target(sample: &CohortSample) -> f64 {
    (sample.target_date - sample.last_visit().date()).num_days() as f64
}

struct Running {
    n: usize,
    sum: f64,
    min: f64,
    max: f64,
}

impl Running {
    fn new() -> Self {
        Running {
            n: 0,
            sum: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn finish(self, name: &str, rows: usize, force: bool) -> Result<NumericStat> {
        let missing_rate = if rows == 0 { 1.0 } else { 1.0 - self.n as f64 / rows as f64 };
        let retained = force || missing_rate <= MAX_MISSING_RATE;
        if retained && self.n == 0 {
            return Err(Error::NoObservations(name.to_string()));
        }
        let (min, max, mean) = if self.n == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (self.min, self.max, self.sum / self.n as f64)
        };
        Ok(NumericStat {
            name: name.to_string(),
            train_min: min,
            train_max: max,
            train_mean: mean,
            missing_rate,
            observed: self.n,
            retained,
        })
    }
}

/// Fits all statistics on the training samples. Each encounter contributes
/// once even when it appears in several samples' histories.
pub fn fit_schema(train: &[CohortSample]) -> Result<FeatureSchema> {
    if train.is_empty() {
        return Err(Error::EmptyCohort(" (no training samples)"));
    }
    // longest history per patient covers every encounter used by that patient's samples
    let mut longest: BTreeMap<&str, &CohortSample> = BTreeMap::new();
    for s in train {
        let entry = longest.entry(s.patient.as_str()).or_insert(s);
        if s.history().len() > entry.history().len() {
            *entry = s;
        }
    }

    let names = numeric_variables();
    let mut running: Vec<Running> = names.iter().map(|_| Running::new()).collect();
    let mut categories: Vec<BTreeSet<String>> = DEMOGRAPHIC_COLUMNS.iter().map(|_| BTreeSet::new()).collect();
    let mut lab_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut dx_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = 0usize;
    for sample in longest.values() {
        let history = sample.history();
        for j in 0..history.len() {
            rows += 1;
            for (acc, name) in running.iter_mut().zip(&names) {
                if let Some(v) = numeric_value(history, j, name) {
                    acc.push(v);
                }
            }
            let rec = &history[j].record;
            for (set, col) in categories.iter_mut().zip(DEMOGRAPHIC_COLUMNS) {
                if let Some(v) = rec.demographics.get(col) {
                    set.insert(v.clone());
                }
            }
            for lab in &history[j].labs {
                *lab_counts.entry(lab.clone()).or_default() += 1;
            }
            for dx in &history[j].problems {
                *dx_counts.entry(dx.clone()).or_default() += 1;
            }
        }
    }

    let numerics = running
        .into_iter()
        .zip(&names)
        .map(|(acc, name)| acc.finish(name, rows, REQUIRED_VARIABLES.contains(name)))
        .collect::<Result<Vec<_>>>()?;

    let mut gap = Running::new();
    for s in train {
        gap.push(time_to_target(s));
    }
    let time_to_target = gap.finish("time_between_visits", train.len(), true)?;

    let categoricals = DEMOGRAPHIC_COLUMNS
        .iter()
        .zip(categories)
        .map(|(name, set)| CategoricalVocab {
            name: name.to_string(),
            vocabulary: set.into_iter().collect(),
        })
        .collect();
    let indicator = |counts: BTreeMap<String, usize>, min_freq: f64, strict: bool| {
        counts
            .into_iter()
            .map(|(name, n)| {
                let frequency = n as f64 / rows as f64;
                let retained = if strict { frequency >= min_freq } else { frequency > min_freq };
                IndicatorStat {
                    name,
                    frequency,
                    retained,
                }
            })
            .collect::<Vec<_>>()
    };
    let labs = indicator(lab_counts, MIN_LAB_FREQUENCY, true);
    let diagnoses = indicator(dx_counts, 1.0 - MAX_MISSING_RATE, false);

    let mut schema = FeatureSchema {
        version: SCHEMA_VERSION,
        clamp: false,
        train_records: rows,
        numerics,
        time_to_target,
        categoricals,
        labs,
        diagnoses,
        columns: Vec::new(),
        lr_columns: Vec::new(),
    };
    schema.columns = schema.encounter_columns();
    schema.lr_columns = schema.lr_input_columns();
    Ok(schema)
}

impl FeatureSchema {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn lr_width(&self) -> usize {
        self.lr_columns.len()
    }

    pub fn numeric(&self, name: &str) -> Option<&NumericStat> {
        self.numerics.iter().find(|n| n.name == name)
    }

    fn retained_numerics(&self) -> impl Iterator<Item = &NumericStat> {
        self.numerics.iter().filter(|n| n.retained)
    }

    fn encounter_columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for n in self.retained_numerics() {
            cols.push(n.name.clone());
            cols.push(format!("{}_missing", n.name));
        }
        cols.push("sex_male".into());
        for c in &self.categoricals {
            cols.extend(c.vocabulary.iter().map(|v| format!("{}={}", c.name, v)));
            cols.push(format!("{}_missing", c.name));
        }
        cols.extend(MedicationCategory::ALL.iter().map(|m| format!("med={m}")));
        cols.extend(self.labs.iter().filter(|l| l.retained).map(|l| format!("lab={}", l.name)));
        cols.extend(
            self.diagnoses
                .iter()
                .filter(|d| d.retained)
                .map(|d| format!("dx={}", d.name)),
        );
        cols
    }

    /// Column indices of the encounter vector that the logistic regression keeps.
    fn lr_static_indices(&self) -> Vec<usize> {
        let bp: BTreeSet<String> = BP_VARIABLES
            .iter()
            .flat_map(|v| [v.to_string(), format!("{v}_missing")])
            .collect();
        (0..self.columns.len())
            .filter(|&i| !bp.contains(&self.columns[i]))
            .collect()
    }

    fn lr_input_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self
            .lr_static_indices()
            .into_iter()
            .map(|i| self.columns[i].clone())
            .collect();
        for k in 1..=LR_LAGS {
            for v in ["systolic", "diastolic", "bp_status"] {
                cols.push(format!("{v}_t-{k}"));
                cols.push(format!("{v}_t-{k}_missing"));
            }
        }
        cols.push("bp_fraction_t-1".into());
        cols.push("bp_fraction_t-1_missing".into());
        cols.push("time_between_visits".into());
        cols
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        hex_digest(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(text)?;
        if schema.version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: schema.version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(schema)
    }

    fn scale(&self, value: f64, stat: &NumericStat) -> f64 {
        let v = scale_minmax(value, stat);
        if self.clamp {
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    }

    /// Mean-imputes then scales; returns `(scaled, missing_indicator)`.
    fn impute_scaled(&self, value: Option<f64>, stat: &NumericStat) -> (f64, f64) {
        let (v, missing) = impute(value, stat);
        (self.scale(v, stat), missing)
    }

    /// Feature vector for `history[j]`; `history` must start at the
    /// beginning of the patient's timeline so `days_since_prev` is defined.
    pub fn encode_encounter(&self, history: &[Encounter], j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.columns.len());
        for stat in self.retained_numerics() {
            let (v, m) = self.impute_scaled(numeric_value(history, j, &stat.name), stat);
            out.push(v);
            out.push(m);
        }
        let rec = &history[j].record;
        out.push(if rec.sex == Sex::Male { 1.0 } else { 0.0 });
        for c in &self.categoricals {
            let (hot, missing) = encode_onehot(rec.demographics.get(&c.name).map(String::as_str), &c.vocabulary);
            out.extend(hot);
            out.push(missing);
        }
        let enc = &history[j];
        out.extend(
            MedicationCategory::ALL
                .iter()
                .map(|m| if enc.medications.contains(m) { 1.0 } else { 0.0 }),
        );
        for l in self.labs.iter().filter(|l| l.retained) {
            out.push(if enc.labs.contains(&l.name) { 1.0 } else { 0.0 });
        }
        for d in self.diagnoses.iter().filter(|d| d.retained) {
            out.push(if enc.problems.contains(&d.name) { 1.0 } else { 0.0 });
        }
        debug_assert_eq!(out.len(), self.columns.len());
        out
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `(value, 0)` when present, `(train_mean, 1)` when absent.
pub fn impute(value: Option<f64>, stat: &NumericStat) -> (f64, f64) {
    match value {
        Some(v) => (v, 0.0),
        None => (stat.train_mean, 1.0),
    }
}

/// `(value - min) / (max - min)`, or 0 for a constant training column. Not clamped.
pub fn scale_minmax(value: f64, stat: &NumericStat) -> f64 {
    let range = stat.train_max - stat.train_min;
    if range == 0.0 {
        0.0
    } else {
        (value - stat.train_min) / range
    }
}

pub fn unscale_minmax(scaled: f64, stat: &NumericStat) -> f64 {
    scaled * (stat.train_max - stat.train_min) + stat.train_min
}

/// One-hot block for a category plus the missing indicator. Unseen categories
/// map to an all-zero block; an absent category also sets the indicator.
pub fn encode_onehot(category: Option<&str>, vocabulary: &[String]) -> (Vec<f64>, f64) {
    let mut hot = vec![0.0; vocabulary.len()];
    match category {
        None => (hot, 1.0),
        Some(c) => {
            if let Some(i) = vocabulary.iter().position(|v| v == c) {
                hot[i] = 1.0;
            }
            (hot, 0.0)
        }
    }
}

/// The last `SEQUENCE_LENGTH` visits of the history, left-padded with zero rows.
pub fn build_sequence(sample: &CohortSample, schema: &FeatureSchema) -> Result<SequenceInput> {
    let history = sample.history();
    if history.is_empty() {
        return Err(Error::EmptyHistory(sample.patient.to_string()));
    }
    let used = history.len().min(SEQUENCE_LENGTH);
    let pad_count = SEQUENCE_LENGTH - used;
    let mut steps = Matrix::zeros(SEQUENCE_LENGTH, schema.width());
    for (row, j) in (history.len() - used..history.len()).enumerate() {
        steps
            .row_mut(pad_count + row)
            .copy_from_slice(&schema.encode_encounter(history, j));
    }
    Ok(SequenceInput { steps, pad_count })
}

/// Last-visit features (blood-pressure columns removed) followed by the
/// blood-pressure lags, the last BP fraction and the days to the target.
pub fn build_lr_input(sample: &CohortSample, schema: &FeatureSchema) -> Result<Vec<f64>> {
    let history = sample.history();
    if history.is_empty() {
        return Err(Error::EmptyHistory(sample.patient.to_string()));
    }
    let n = history.len();
    let last = schema.encode_encounter(history, n - 1);
    let mut out: Vec<f64> = schema.lr_static_indices().into_iter().map(|i| last[i]).collect();
    let stat = |name: &str| schema.numeric(name).expect("schema carries every numeric");
    let (sys, dia, status) = (stat("systolic"), stat("diastolic"), stat("bp_status"));
    for k in 1..=LR_LAGS {
        let lagged = (k <= n).then(|| n - k);
        let value = |name| lagged.and_then(|j| numeric_value(history, j, name));
        for (name, st) in [("systolic", sys), ("diastolic", dia), ("bp_status", status)] {
            let (v, m) = schema.impute_scaled(value(name), st);
            out.push(v);
            out.push(m);
        }
    }
    let (v, m) = schema.impute_scaled(numeric_value(history, n - 1, "bp_fraction"), stat("bp_fraction"));
    out.push(v);
    out.push(m);
    out.push(schema.scale(time_to_target(sample), &schema.time_to_target));
    debug_assert_eq!(out.len(), schema.lr_width());
    Ok(out)
}

/// Recovers the raw `(systolic, diastolic)` lags from a logistic regression
/// input; `None` where either lag was imputed.
pub fn decode_lr_bp_lags(x: &[f64], schema: &FeatureSchema) -> Vec<Option<(f64, f64)>> {
    let index: HashMap<&str, usize> = schema
        .lr_columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let sys = schema.numeric("systolic").expect("systolic stat");
    let dia = schema.numeric("diastolic").expect("diastolic stat");
    (1..=LR_LAGS)
        .map(|k| {
            let get = |c: String| x[index[c.as_str()]];
            if get(format!("systolic_t-{k}_missing")) == 1.0
                || get(format!("diastolic_t-{k}_missing")) == 1.0
            {
                return None;
            }
            Some((
                unscale_minmax(get(format!("systolic_t-{k}")), sys),
                unscale_minmax(get(format!("diastolic_t-{k}")), dia),
            ))
        })
        .collect()
}

/// Sequence export: one row per (sample, timestep) under the canonical header.
pub fn write_sequence_features<W: Write>(
    writer: W,
    samples: &[CohortSample],
    schema: &FeatureSchema,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id".to_string(), "target_date".into(), "timestep".into()];
    header.extend(schema.columns.iter().cloned());
    w.write_record(&header)?;
    for s in samples {
        let seq = build_sequence(s, schema)?;
        for t in 0..SEQUENCE_LENGTH {
            let mut row = vec![s.patient.to_string(), s.target_date.to_string(), t.to_string()];
            row.extend(seq.steps.row(t).iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<feature export>", e))?;
    Ok(())
}

/// Logistic regression export: one row per sample.
pub fn write_lr_features<W: Write>(
    writer: W,
    samples: &[CohortSample],
    schema: &FeatureSchema,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id".to_string(), "target_date".into(), "label".into()];
    header.extend(schema.lr_columns.iter().cloned());
    w.write_record(&header)?;
    for s in samples {
        let x = build_lr_input(s, schema)?;
        let mut row = vec![
            s.patient.to_string(),
            s.target_date.to_string(),
            (s.label as u8).to_string(),
        ];
        row.extend(x.iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<feature export>", e))?;
    Ok(())
}
