//! Cohort selection, 90-day target pairing, labeling and patient-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{Encounter, PatientId, Sex, Timelines};
use crate::error::{Error, Result};

pub const SYSTOLIC_UNCONTROLLED: f64 = 140.0;
pub const DIASTOLIC_UNCONTROLLED: f64 = 90.0;
/// Readings below these floors are treated as measurement errors.
pub const SYSTOLIC_ERROR_FLOOR: f64 = 90.0;
pub const DIASTOLIC_ERROR_FLOOR: f64 = 60.0;
pub const DEFAULT_HORIZON_DAYS: i64 = 90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BpStatus {
    Controlled = 0,
    Uncontrolled = 1,
}

impl BpStatus {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_bool(uncontrolled: bool) -> Self {
        if uncontrolled {
            BpStatus::Uncontrolled
        } else {
            BpStatus::Controlled
        }
    }
}

/// Uncontrolled iff systolic >= 140 or diastolic >= 90.
pub fn label_bp_status(systolic: f64, diastolic: f64) -> BpStatus {
    BpStatus::from_bool(systolic >= SYSTOLIC_UNCONTROLLED || diastolic >= DIASTOLIC_UNCONTROLLED)
}

/// Status of an encounter when both readings are present.
pub fn encounter_status(encounter: &Encounter) -> Option<BpStatus> {
    encounter
        .record
        .blood_pressure()
        .map(|(s, d)| label_bp_status(s, d))
}

pub fn compute_bp_fraction(systolic: Option<f64>, diastolic: Option<f64>) -> Option<f64> {
    Some(systolic? / diastolic?)
}

/// Drops encounters whose readings (both present) fall below the error floors.
pub fn exclude_bp_reading_errors(encounters: Vec<Encounter>) -> Vec<Encounter> {
    encounters
        .into_iter()
        .filter(|e| match e.record.blood_pressure() {
            Some((s, d)) => s >= SYSTOLIC_ERROR_FLOOR && d >= DIASTOLIC_ERROR_FLOOR,
            None => true,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub horizon_days: i64,
    pub min_age: f64,
    pub max_age: f64,
    /// Month (1-12) on which the fiscal year starts; 1 = calendar year.
    pub fiscal_year_start_month: u32,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            horizon_days: DEFAULT_HORIZON_DAYS,
            min_age: 18.0,
            max_age: 90.0,
            fiscal_year_start_month: 1,
        }
    }
}

/// Exclusion rules in precedence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExclusionRule {
    Deceased,
    AgeOutOfRange,
    SparseFiscalYears,
    NoVitalSigns,
    NoFollowUpWithinHorizon,
}

impl ExclusionRule {
    pub const ORDER: [ExclusionRule; 5] = [
        ExclusionRule::Deceased,
        ExclusionRule::AgeOutOfRange,
        ExclusionRule::SparseFiscalYears,
        ExclusionRule::NoVitalSigns,
        ExclusionRule::NoFollowUpWithinHorizon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExclusionRule::Deceased => "deceased",
            ExclusionRule::AgeOutOfRange => "age_out_of_range",
            ExclusionRule::SparseFiscalYears => "fewer_than_2_records_per_fiscal_year",
            ExclusionRule::NoVitalSigns => "no_vital_signs",
            ExclusionRule::NoFollowUpWithinHorizon => "no_record_within_horizon",
        }
    }
}

impl fmt::Display for ExclusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionStep {
    pub rule: ExclusionRule,
    pub excluded: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionTally {
    pub initial: usize,
    pub steps: Vec<ExclusionStep>,
}

impl ExclusionTally {
    pub fn excluded(&self, rule: ExclusionRule) -> usize {
        self.steps
            .iter()
            .find(|s| s.rule == rule)
            .map_or(0, |s| s.excluded)
    }

    pub fn remaining(&self) -> usize {
        self.steps.last().map_or(self.initial, |s| s.remaining)
    }

    /// `rule,excluded_count,remaining_count`, starting from the full population.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rule", "excluded_count", "remaining_count"])?;
        w.write_record(["all_patients", "0", &self.initial.to_string()])?;
        for step in &self.steps {
            w.write_record([
                step.rule.name(),
                &step.excluded.to_string(),
                &step.remaining.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<exclusion report>", e))?;
        Ok(())
    }
}

fn fiscal_year(date: NaiveDate, start_month: u32) -> i32 {
    if date.month() >= start_month {
        date.year()
    } else {
        date.year() - 1
    }
}

/// First rule (in precedence order) that excludes this patient.
pub fn first_exclusion(encounters: &[Encounter], config: &CohortConfig) -> Option<ExclusionRule> {
    if encounters.iter().any(|e| e.record.deceased) {
        return Some(ExclusionRule::Deceased);
    }
    if let Some(last) = encounters.last() {
        let age = last.record.age;
        if age > config.max_age || age < config.min_age {
            return Some(ExclusionRule::AgeOutOfRange);
        }
    }
    let mut per_year: BTreeMap<i32, usize> = BTreeMap::new();
    for e in encounters {
        *per_year
            .entry(fiscal_year(e.date(), config.fiscal_year_start_month))
            .or_default() += 1;
    }
    if per_year.values().all(|&n| n < 2) {
        return Some(ExclusionRule::SparseFiscalYears);
    }
    if !encounters.iter().any(|e| e.record.has_any_vital()) {
        return Some(ExclusionRule::NoVitalSigns);
    }
    let n = encounters.len();
    let gap = (encounters[n - 1].date() - encounters[n - 2].date()).num_days();
    if gap > config.horizon_days {
        return Some(ExclusionRule::NoFollowUpWithinHorizon);
    }
    None
}

/// Applies the exclusion rules; each excluded patient is counted once, under
/// the first rule that matches.
pub fn apply_cohort_exclusions(
    timelines: &Timelines,
    config: &CohortConfig,
) -> (Timelines, ExclusionTally) {
    let mut counts: BTreeMap<ExclusionRule, usize> = BTreeMap::new();
    let mut included = BTreeMap::new();
    for (id, encounters) in &timelines.patients {
        match first_exclusion(encounters, config) {
            Some(rule) => *counts.entry(rule).or_default() += 1,
            None => {
                included.insert(id.clone(), encounters.clone());
            }
        }
    }
    let mut remaining = timelines.patients.len();
    let steps = ExclusionRule::ORDER
        .iter()
        .map(|&rule| {
            let excluded = counts.get(&rule).copied().unwrap_or(0);
            remaining -= excluded;
            ExclusionStep {
                rule,
                excluded,
                remaining,
            }
        })
        .collect();
    (
        Timelines {
            patients: included,
            dropped_events: timelines.dropped_events,
        },
        ExclusionTally {
            initial: timelines.patients.len(),
            steps,
        },
    )
}

/// A (history, target) pair. The history is every encounter strictly before
/// the target encounter; the label is the target encounter's status.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSample {
    pub patient: PatientId,
    timeline: Arc<[Encounter]>,
    target_index: usize,
    pub target_date: NaiveDate,
    pub label: BpStatus,
    pub sex: Sex,
    /// The last qualifying pair for this patient; the one used for evaluation.
    pub is_final: bool,
}

impl CohortSample {
    /// Most recent encounter last. Never empty.
    pub fn history(&self) -> &[Encounter] {
        &self.timeline[..self.target_index]
    }

    pub fn target(&self) -> &Encounter {
        &self.timeline[self.target_index]
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn last_visit(&self) -> &Encounter {
        &self.timeline[self.target_index - 1]
    }
}

/// One sample per encounter that has a labelable reading and follows its
/// predecessor within `horizon_days`.
pub fn build_samples(
    patient: &PatientId,
    encounters: &[Encounter],
    horizon_days: i64,
) -> Vec<CohortSample> {
    let timeline: Arc<[Encounter]> = Arc::from(encounters.to_vec());
    let mut samples: Vec<CohortSample> = (1..timeline.len())
        .filter_map(|t| {
            let target = &timeline[t];
            let label = encounter_status(target)?;
            let gap = (target.date() - timeline[t - 1].date()).num_days();
            (gap <= horizon_days).then(|| CohortSample {
                patient: patient.clone(),
                timeline: Arc::clone(&timeline),
                target_index: t,
                target_date: target.date(),
                label,
                sex: target.record.sex,
                is_final: false,
            })
        })
        .collect();
    if let Some(last) = samples.last_mut() {
        last.is_final = true;
    }
    samples
}

pub fn build_all_samples(timelines: &Timelines, horizon_days: i64) -> Vec<CohortSample> {
    timelines
        .patients
        .iter()
        .flat_map(|(id, encs)| build_samples(id, encs, horizon_days))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.72,
            validation: 0.13,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<PatientId, Split>,
}

impl SplitAssignment {
    pub fn get(&self, patient: &PatientId) -> Option<Split> {
        self.assignment.get(patient).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    pub fn patients(&self, split: Split) -> impl Iterator<Item = &PatientId> {
        self.assignment
            .iter()
            .filter(move |(_, &s)| s == split)
            .map(|(p, _)| p)
    }
}

/// Deterministic patient-level split. Sizes are `floor(fraction * n)` with the
/// remainder handed out one patient at a time in train, validation, test order.
pub fn split_patients(
    patients: &[PatientId],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitAssignment> {
    let fr = [fractions.train, fractions.validation, fractions.test];
    if fr.iter().any(|f| !f.is_finite() || *f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be non-negative and sum to 1, got {fr:?}"
        )));
    }
    let mut ids: Vec<PatientId> = patients
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyCohort(""));
    }
    let n = ids.len();
    let mut sizes: Vec<usize> = fr.iter().map(|f| (f * n as f64 + 1e-9).floor() as usize).collect();
    let mut k = 0;
    while sizes.iter().sum::<usize>() < n {
        sizes[k % 3] += 1;
        k += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut assignment = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        for id in it.by_ref().take(size) {
            assignment.insert(id, split);
        }
    }
    Ok(SplitAssignment { assignment })
}
