//! Longitudinal EHR domain types, CSV ingestion for the four source tables,
//! and the per-patient timeline merge.

mod medication;
mod table;
mod timeline;

use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use medication::{categorize_medication, normalize_drug_name, MedicationCategory, DRUG_FAMILIES};
pub use table::{
    parse_table, read_diagnoses, read_encounters, read_labs, read_medications, write_diagnoses,
    write_encounters, write_labs, write_medications, write_row_errors, ParsedTable, RawTables, RowError,
    TableData, TableKind,
};
pub use timeline::{merge_patient_timeline, Encounter, Timelines};

/// Vital-sign columns carried in `encounters.csv`, in file order.
pub const VITAL_COLUMNS: [&str; 8] = [
    "pulse",
    "height",
    "weight",
    "bmi",
    "temperature",
    "respiratory_rate",
    "heart_rate",
    "fatigue",
];

/// Categorical demographic columns carried in `encounters.csv`, in file order.
pub const DEMOGRAPHIC_COLUMNS: [&str; 4] = ["race", "marital_status", "language", "smoking"];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PatientId(String);

impl PatientId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(Error::InvalidConfig("patient id must be non-empty".into()));
        }
        Ok(PatientId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PatientId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        PatientId::new(value)
    }
}

impl From<PatientId> for String {
    fn from(id: PatientId) -> String {
        id.0
    }
}

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }

    pub fn from_code(code: &str) -> Option<Sex> {
        match code {
            "M" => Some(Sex::Male),
            "F" => Some(Sex::Female),
            _ => None,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
        })
    }
}

/// One patient visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterRecord {
    pub patient: PatientId,
    pub date: NaiveDate,
    pub systolic: Option<f64>,
    pub diastolic: Option<f64>,
    /// Keyed by the names in [`VITAL_COLUMNS`]; absent keys are missing values.
    pub vitals: BTreeMap<String, f64>,
    pub diagnosis_code: Option<String>,
    pub sex: Sex,
    pub age: f64,
    /// Keyed by the names in [`DEMOGRAPHIC_COLUMNS`]; absent keys are missing values.
    pub demographics: BTreeMap<String, String>,
    pub deceased: bool,
}

impl EncounterRecord {
    pub fn vital(&self, name: &str) -> Option<f64> {
        self.vitals.get(name).copied()
    }

    /// Both readings present.
    pub fn blood_pressure(&self) -> Option<(f64, f64)> {
        Some((self.systolic?, self.diastolic?))
    }

    pub fn has_any_vital(&self) -> bool {
        self.systolic.is_some() || self.diastolic.is_some() || !self.vitals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicationEvent {
    pub patient: PatientId,
    pub date: NaiveDate,
    /// Normalized with [`normalize_drug_name`].
    pub drug_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabOrderEvent {
    pub patient: PatientId,
    pub date: NaiveDate,
    pub panel_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisEvent {
    pub patient: PatientId,
    pub date: NaiveDate,
    pub code: String,
    pub is_principal: bool,
}
