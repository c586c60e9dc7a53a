use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use proptest::prelude::*;

use htn_risk::ehr::{merge_patient_timeline, EncounterRecord, LabOrderEvent, PatientId, Sex};

fn day(d: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2014, 1, 1).unwrap() + Duration::days(d)
}

fn encounter(patient: &PatientId, d: i64) -> EncounterRecord {
    EncounterRecord {
        patient: patient.clone(),
        date: day(d),
        systolic: Some(130.0),
        diastolic: Some(80.0),
        vitals: BTreeMap::new(),
        diagnosis_code: None,
        sex: Sex::Male,
        age: 50.0,
        demographics: BTreeMap::new(),
        deceased: false,
    }
}

proptest! {
    /// Each lab lands on the earliest encounter of the latest encounter date
    /// not after it, found by scanning every (event, encounter) pair.
    #[test]
    fn lab_join_matches_pairwise_scan(
        visit_days in prop::collection::vec((0usize..3, 0i64..60), 1..25),
        lab_days in prop::collection::vec((0usize..4, 0i64..70), 0..40),
    ) {
        let ids: Vec<PatientId> = (0..4).map(|i| PatientId::new(format!("P{i}")).unwrap()).collect();
        let encounters: Vec<EncounterRecord> = visit_days.iter().map(|&(p, d)| encounter(&ids[p], d)).collect();
        let labs: Vec<LabOrderEvent> = lab_days
            .iter()
            .enumerate()
            .map(|(i, &(p, d))| LabOrderEvent {
                patient: ids[p].clone(),
                date: day(d),
                panel_name: format!("panel{i}"),
            })
            .collect();
        let merged = merge_patient_timeline(&encounters, &[], &labs, &[]);

        let mut dropped = 0;
        for lab in &labs {
            let mut best: Option<NaiveDate> = None;
            for e in &encounters {
                if e.patient == lab.patient && e.date <= lab.date && best.is_none_or(|b| e.date > b) {
                    best = Some(e.date);
                }
            }
            let holders: Vec<(usize, NaiveDate)> = merged
                .patients
                .get(&lab.patient)
                .map(|list| {
                    list.iter()
                        .enumerate()
                        .filter(|(_, e)| e.labs.contains(&lab.panel_name))
                        .map(|(i, e)| (i, e.date()))
                        .collect()
                })
                .unwrap_or_default();
            match best {
                None => {
                    dropped += 1;
                    prop_assert!(holders.is_empty());
                }
                Some(date) => {
                    prop_assert_eq!(holders.len(), 1);
                    prop_assert_eq!(holders[0].1, date);
                    let list = &merged.patients[&lab.patient];
                    prop_assert!(list[..holders[0].0].iter().all(|e| e.date() < date));
                }
            }
        }
        prop_assert_eq!(merged.dropped_events, dropped);
        let total: usize = merged.patients.values().map(Vec::len).sum();
        prop_assert_eq!(total, encounters.len());
        for list in merged.patients.values() {
            prop_assert!(list.windows(2).all(|w| w[0].date() <= w[1].date()));
        }
    }
}
