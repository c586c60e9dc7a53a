//! Stage-level glue shared by the command-line front end and the end-to-end
//! tests: cohort construction, split-aware sample sets, model artifacts,
//! scoring, evaluation against the carry-forward baseline, attribution and
//! run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    aggregate_sequence_attributions, population_attributions, rank_lr_weights, rank_scores, RankedFeature,
};
use crate::cohort::{
    apply_cohort_exclusions, build_samples, encounter_status, exclude_bp_reading_errors, split_patients, CohortConfig,
    CohortSample, ExclusionTally, Split, SplitAssignment, SplitFractions,
};
use crate::derive_seed;
use crate::ehr::{merge_patient_timeline, RawTables, Timelines};
use crate::error::{Error, Result};
use crate::eval::{carry_forward_baseline, grouped_report, roc_curve, EvalReport, RocCurve};
use crate::featurize::{build_lr_input, build_sequence, hex_digest, FeatureSchema, SequenceInput};
use crate::nnet::{Example, LrParams, LstmParams, Matrix, Model};
use crate::train::{class_weights, grid_search, train_model, ClassWeights, ModelKind, TrainConfig, TrainLog};

pub const ARTIFACT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Merges the tables, drops reading errors and applies the exclusions.
pub fn build_timelines(tables: &RawTables, config: &CohortConfig) -> (Timelines, ExclusionTally) {
    let mut merged = merge_patient_timeline(
        &tables.encounters,
        &tables.medications,
        &tables.labs,
        &tables.diagnoses,
    );
    for encounters in merged.patients.values_mut() {
        *encounters = exclude_bp_reading_errors(std::mem::take(encounters));
    }
    merged.patients.retain(|_, e| !e.is_empty());
    apply_cohort_exclusions(&merged, config)
}

/// Included timelines plus the patient split; everything later stages need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortArtifact {
    pub version: u32,
    pub config: CohortConfig,
    pub fractions: SplitFractions,
    pub split_seed: u64,
    pub timelines: Timelines,
    pub splits: SplitAssignment,
}

pub fn build_cohort(
    tables: &RawTables,
    config: &CohortConfig,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(CohortArtifact, ExclusionTally)> {
    let (timelines, tally) = build_timelines(tables, config);
    if timelines.is_empty() {
        return Err(Error::EmptyCohort(" after exclusions"));
    }
    let ids: Vec<_> = timelines.patients.keys().cloned().collect();
    let split_seed = derive_seed(seed, "split");
    let splits = split_patients(&ids, fractions, split_seed)?;
    Ok((
        CohortArtifact {
            version: ARTIFACT_VERSION,
            config: config.clone(),
            fractions,
            split_seed,
            timelines,
            splits,
        },
        tally,
    ))
}

/// Samples per split. Training keeps every qualifying pair; validation and
/// test keep each patient's final pair only.
#[derive(Debug, Clone, Default)]
pub struct SplitSamples {
    pub train: Vec<CohortSample>,
    pub validation: Vec<CohortSample>,
    pub test: Vec<CohortSample>,
}

impl SplitSamples {
    pub fn get(&self, split: Split) -> &[CohortSample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

impl CohortArtifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("cohort serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: CohortArtifact = serde_json::from_str(text)?;
        if a.version != ARTIFACT_VERSION {
            return Err(Error::Version {
                found: a.version,
                expected: ARTIFACT_VERSION,
            });
        }
        Ok(a)
    }

    pub fn samples(&self) -> SplitSamples {
        let mut out = SplitSamples::default();
        for (id, encounters) in &self.timelines.patients {
            let split = self.splits.get(id).expect("every included patient is split");
            let samples = build_samples(id, encounters, self.config.horizon_days);
            match split {
                Split::Train => out.train.extend(samples),
                Split::Validation => out.validation.extend(samples.into_iter().filter(|s| s.is_final)),
                Split::Test => out.test.extend(samples.into_iter().filter(|s| s.is_final)),
            }
        }
        out
    }

    /// Summary rows `patient_id,split,target_date,label,sex,is_final,history_len`.
    pub fn write_samples_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["patient_id", "split", "target_date", "label", "sex", "is_final", "history_len"])?;
        for (id, encounters) in &self.timelines.patients {
            let split = self.splits.get(id).expect("every included patient is split");
            for s in build_samples(id, encounters, self.config.horizon_days) {
                w.write_record([
                    id.to_string(),
                    split.to_string(),
                    s.target_date.to_string(),
                    (s.label as u8).to_string(),
                    s.sex.to_string(),
                    u8::from(s.is_final).to_string(),
                    s.history().len().to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<samples export>", e))?;
        Ok(())
    }
}

fn labels(samples: &[CohortSample]) -> Vec<f64> {
    samples.iter().map(|s| s.label.as_f64()).collect()
}

pub fn lr_examples(
    samples: &[CohortSample],
    schema: &FeatureSchema,
    weights: &ClassWeights,
) -> Result<Vec<Example<Vec<f64>>>> {
    samples
        .iter()
        .map(|s| {
            let label = s.label.as_f64();
            Ok(Example {
                input: build_lr_input(s, schema)?,
                label,
                weight: weights.weight(label),
            })
        })
        .collect()
}

pub fn lstm_examples(
    samples: &[CohortSample],
    schema: &FeatureSchema,
    weights: &ClassWeights,
) -> Result<Vec<Example<SequenceInput>>> {
    samples
        .iter()
        .map(|s| {
            let label = s.label.as_f64();
            Ok(Example {
                input: build_sequence(s, schema)?,
                label,
                weight: weights.weight(label),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum ModelParams {
    Lr(LrParams),
    Lstm(LstmParams),
}

/// A trained model with everything inference needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub version: u32,
    pub config: TrainConfig,
    pub class_weights: ClassWeights,
    pub schema: FeatureSchema,
    pub params: ModelParams,
}

impl ModelArtifact {
    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Lr(_) => ModelKind::Lr,
            ModelParams::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: ModelArtifact = serde_json::from_str(text)?;
        if a.version != ARTIFACT_VERSION {
            return Err(Error::Version {
                found: a.version,
                expected: ARTIFACT_VERSION,
            });
        }
        Ok(a)
    }

    /// Probability of an uncontrolled target for every sample.
    pub fn score(&self, samples: &[CohortSample]) -> Result<Vec<f64>> {
        match &self.params {
            ModelParams::Lr(m) => samples
                .iter()
                .map(|s| m.probability(&build_lr_input(s, &self.schema)?))
                .collect(),
            ModelParams::Lstm(m) => samples
                .iter()
                .map(|s| m.probability(&build_sequence(s, &self.schema)?))
                .collect(),
        }
    }
}

fn initial_lstm(config: &TrainConfig, features: usize) -> LstmParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init"));
    LstmParams::init(features, config.hidden_size, &mut rng)
}

/// Trains one model on the training samples with validation early stopping.
pub fn train_stage(
    config: &TrainConfig,
    schema: &FeatureSchema,
    samples: &SplitSamples,
) -> Result<(ModelArtifact, TrainLog)> {
    if samples.validation.is_empty() {
        return Err(Error::EmptyCohort(" (no validation samples)"));
    }
    let weights = class_weights(&labels(&samples.train))?;
    let (params, log) = match config.model_kind {
        ModelKind::Lr => {
            let train = lr_examples(&samples.train, schema, &weights)?;
            let val = lr_examples(&samples.validation, schema, &weights)?;
            let (m, log) = train_model(LrParams::zeros(schema.lr_width()), config, &train, &val)?;
            (ModelParams::Lr(m), log)
        }
        ModelKind::Lstm => {
            let train = lstm_examples(&samples.train, schema, &weights)?;
            let val = lstm_examples(&samples.validation, schema, &weights)?;
            let (m, log) = train_model(initial_lstm(config, schema.width()), config, &train, &val)?;
            (ModelParams::Lstm(m), log)
        }
    };
    Ok((
        ModelArtifact {
            version: ARTIFACT_VERSION,
            config: config.clone(),
            class_weights: weights,
            schema: schema.clone(),
            params,
        },
        log,
    ))
}

/// Grid search by validation AUROC, then the winning model and its log.
pub fn grid_train_stage(
    configs: &[TrainConfig],
    schema: &FeatureSchema,
    samples: &SplitSamples,
) -> Result<(ModelArtifact, TrainLog, Vec<crate::train::GridResult>)> {
    let val_labels = labels(&samples.validation);
    let (index, results) = grid_search(configs, |c| {
        let (artifact, _) = train_stage(c, schema, samples)?;
        crate::eval::auroc(&val_labels, &artifact.score(&samples.validation)?)
    })?;
    // training is deterministic, so refitting the winner reproduces it exactly
    let (artifact, log) = train_stage(&configs[index], schema, samples)?;
    Ok((artifact, log, results))
}

/// Model and baseline reports side by side, plus their ROC curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub threshold: f64,
    /// Test samples left out because no history visit carries a reading.
    pub skipped_without_baseline: usize,
    pub reports: BTreeMap<String, EvalReport>,
    #[serde(skip)]
    pub curves: BTreeMap<String, RocCurve>,
}

pub const BASELINE_NAME: &str = "baseline";

pub fn baseline_scores(samples: &[CohortSample]) -> Result<Vec<f64>> {
    samples.iter().map(|s| carry_forward_baseline(s).map(|(_, p)| p)).collect()
}

/// Always includes the carry-forward baseline; adds each model under its kind.
/// Every method is scored on the same samples: those the baseline can score.
pub fn evaluate_stage(models: &[&ModelArtifact], test: &[CohortSample], threshold: f64) -> Result<ComparisonReport> {
    let scorable: Vec<CohortSample> = test
        .iter()
        .filter(|s| s.history().iter().any(|e| encounter_status(e).is_some()))
        .cloned()
        .collect();
    let skipped_without_baseline = test.len() - scorable.len();
    let test = scorable.as_slice();
    if test.is_empty() {
        return Err(Error::EmptyCohort(" (no test samples)"));
    }
    let y = labels(test);
    let mut scored = vec![(BASELINE_NAME.to_string(), baseline_scores(test)?)];
    for m in models {
        scored.push((m.kind().name().to_string(), m.score(test)?));
    }
    let mut reports = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for (name, scores) in scored {
        reports.insert(name.clone(), grouped_report(test, &scores, threshold)?);
        match roc_curve(&y, &scores) {
            Ok(c) => {
                curves.insert(name, c);
            }
            Err(Error::SingleClass(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(ComparisonReport {
        threshold,
        skipped_without_baseline,
        reports,
        curves,
    })
}

/// Ranked attributions plus, for sequence models, the per-timestep means.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub ranked: Vec<RankedFeature>,
    pub per_step: Option<Matrix>,
    pub max_completeness_gap: Option<f64>,
}

/// LR: weights ranked by magnitude. LSTM: integrated gradients against the
/// zero baseline, averaged over `samples` and summed over timesteps.
pub fn attribute_stage(
    model: &ModelArtifact,
    samples: &[CohortSample],
    top_k: usize,
    ig_steps: usize,
) -> Result<AttributionResult> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top k must be positive".into()));
    }
    match &model.params {
        ModelParams::Lr(m) => Ok(AttributionResult {
            ranked: rank_lr_weights(m, &model.schema.lr_columns, top_k)?,
            per_step: None,
            max_completeness_gap: None,
        }),
        ModelParams::Lstm(m) => {
            let inputs = samples
                .iter()
                .map(|s| build_sequence(s, &model.schema))
                .collect::<Result<Vec<_>>>()?;
            let pop = population_attributions(m, &inputs, ig_steps)?;
            let totals = aggregate_sequence_attributions(pop.per_step.data(), model.schema.width())?;
            Ok(AttributionResult {
                ranked: rank_scores(&model.schema.columns, &totals, top_k)?,
                per_step: Some(pop.per_step),
                max_completeness_gap: Some(pop.max_completeness_gap),
            })
        }
    }
}

/// A file an artifact was built from or wrote, with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    /// `None` for outputs that embed wall-clock timings.
    pub sha256: Option<String>,
}

impl ArtifactRef {
    pub fn hashed(path: &Path) -> Result<Self> {
        Ok(ArtifactRef {
            path: path.to_path_buf(),
            sha256: Some(hash_file(path)?),
        })
    }

    pub fn unhashed(path: &Path) -> Self {
        ArtifactRef {
            path: path.to_path_buf(),
            sha256: None,
        }
    }
}

/// Provenance record written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

impl RunManifest {
    pub fn new(stage: &str, seed: u64) -> Self {
        RunManifest {
            stage: stage.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}
