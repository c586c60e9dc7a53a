use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    categorize_medication, DiagnosisEvent, EncounterRecord, LabOrderEvent, MedicationCategory,
    MedicationEvent, PatientId,
};

/// An encounter with the order and diagnosis indicators attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub record: EncounterRecord,
    pub medications: BTreeSet<MedicationCategory>,
    pub drugs: BTreeSet<String>,
    pub labs: BTreeSet<String>,
    pub problems: BTreeSet<String>,
    pub principal_diagnosis: Option<String>,
}

impl Encounter {
    pub fn new(record: EncounterRecord) -> Self {
        Encounter {
            principal_diagnosis: record.diagnosis_code.clone(),
            problems: record.diagnosis_code.iter().cloned().collect(),
            record,
            medications: BTreeSet::new(),
            drugs: BTreeSet::new(),
            labs: BTreeSet::new(),
        }
    }

    pub fn date(&self) -> NaiveDate {
        self.record.date
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timelines {
    pub patients: BTreeMap<PatientId, Vec<Encounter>>,
    /// Order/diagnosis events with no encounter on or before their date.
    pub dropped_events: usize,
}

impl Timelines {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

/// Index of the encounter an event dated `date` attaches to: the first
/// encounter on the latest date not after `date`.
fn attach_index(encounters: &[Encounter], date: NaiveDate) -> Option<usize> {
    let upto = encounters.partition_point(|e| e.date() <= date);
    if upto == 0 {
        return None;
    }
    let anchor = encounters[upto - 1].date();
    Some(encounters.partition_point(|e| e.date() < anchor))
}

/// Groups encounters per patient in ascending date order and attaches each
/// medication, lab and diagnosis event to the same-date encounter, falling
/// back to the most recent prior one. Events with no such encounter are
/// dropped and counted.
pub fn merge_patient_timeline(
    encounters: &[EncounterRecord],
    medications: &[MedicationEvent],
    labs: &[LabOrderEvent],
    diagnoses: &[DiagnosisEvent],
) -> Timelines {
    let mut patients: BTreeMap<PatientId, Vec<Encounter>> = BTreeMap::new();
    for rec in encounters {
        patients
            .entry(rec.patient.clone())
            .or_default()
            .push(Encounter::new(rec.clone()));
    }
    for list in patients.values_mut() {
        list.sort_by_key(|e| e.date());
    }

    let mut dropped = 0usize;
    let mut target = |patient: &PatientId, date: NaiveDate| -> Option<(PatientId, usize)> {
        let found = patients
            .get(patient)
            .and_then(|list| attach_index(list, date))
            .map(|i| (patient.clone(), i));
        if found.is_none() {
            dropped += 1;
        }
        found
    };

    let med_targets: Vec<_> = medications.iter().map(|m| target(&m.patient, m.date)).collect();
    let lab_targets: Vec<_> = labs.iter().map(|l| target(&l.patient, l.date)).collect();
    let dx_targets: Vec<_> = diagnoses.iter().map(|d| target(&d.patient, d.date)).collect();

    let mut principal_seen: BTreeSet<(PatientId, usize)> = BTreeSet::new();
    for (m, t) in medications.iter().zip(med_targets) {
        if let Some((p, i)) = t {
            let enc = &mut patients.get_mut(&p).expect("attached patient exists")[i];
            enc.medications.extend(categorize_medication(&m.drug_name));
            enc.drugs.insert(m.drug_name.clone());
        }
    }
    for (l, t) in labs.iter().zip(lab_targets) {
        if let Some((p, i)) = t {
            patients.get_mut(&p).expect("attached patient exists")[i]
                .labs
                .insert(l.panel_name.clone());
        }
    }
    for (d, t) in diagnoses.iter().zip(dx_targets) {
        if let Some((p, i)) = t {
            let enc = &mut patients.get_mut(&p).expect("attached patient exists")[i];
            enc.problems.insert(d.code.clone());
            // the diagnoses table overrides the encounter's own code, first principal wins
            if d.is_principal && principal_seen.insert((p.clone(), i)) {
                enc.principal_diagnosis = Some(d.code.clone());
            }
        }
    }

    Timelines {
        patients,
        dropped_events: dropped,
    }
}
