use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MedicationCategory {
    AceInhibitor,
    Diuretic,
    BetaBlocker,
    Antihypertensive,
    CalciumChannelBlocker,
    Vasodilator,
    Other,
}

impl MedicationCategory {
    pub const ALL: [MedicationCategory; 7] = [
        MedicationCategory::AceInhibitor,
        MedicationCategory::Diuretic,
        MedicationCategory::BetaBlocker,
        MedicationCategory::Antihypertensive,
        MedicationCategory::CalciumChannelBlocker,
        MedicationCategory::Vasodilator,
        MedicationCategory::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MedicationCategory::AceInhibitor => "ace_inhibitor",
            MedicationCategory::Diuretic => "diuretic",
            MedicationCategory::BetaBlocker => "beta_blocker",
            MedicationCategory::Antihypertensive => "antihypertensive",
            MedicationCategory::CalciumChannelBlocker => "calcium_channel_blocker",
            MedicationCategory::Vasodilator => "vasodilator",
            MedicationCategory::Other => "other",
        }
    }
}

impl fmt::Display for MedicationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

use MedicationCategory::*;

/// Hypertensive drug families. A drug listed under two families appears
/// once per family.
pub const DRUG_FAMILIES: &[(&str, MedicationCategory)] = &[
    ("lisinopril", AceInhibitor),
    ("benazepril", AceInhibitor),
    ("hydrochlorothiazide", Diuretic),
    ("triamterene", Diuretic),
    ("chlorothiazide", Diuretic),
    ("hydrochlorothiazide/lisinopril", Diuretic),
    ("chlortalidone", Diuretic),
    ("atenolol", BetaBlocker),
    ("metoprolol", BetaBlocker),
    ("nadolol", BetaBlocker),
    ("labetalol", BetaBlocker),
    ("bisoprolol", BetaBlocker),
    ("carvedilol", BetaBlocker),
    ("amlodipine", CalciumChannelBlocker),
    ("nifedipine", CalciumChannelBlocker),
    ("nifedipine", Antihypertensive),
    ("irbesartan", Antihypertensive),
    ("candesartan", Antihypertensive),
    ("felodipine", Antihypertensive),
    ("valsartan", Antihypertensive),
    ("hydrochlorothiazide/losartan", Antihypertensive),
    ("telmisartan", Antihypertensive),
    ("hydrochlorothiazide/lisinopril", Antihypertensive),
    ("losartan", Antihypertensive),
    ("chlortalidon", Antihypertensive),
    ("hydralazine", Vasodilator),
];

/// Lowercases, trims, collapses internal whitespace and removes spaces
/// around `/` in combination products.
pub fn normalize_drug_name(raw: &str) -> String {
    let collapsed = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed.replace(" /", "/").replace("/ ", "/")
}

/// Exact lookup on the normalized name; anything unlisted is `Other`.
pub fn categorize_medication(drug_name: &str) -> BTreeSet<MedicationCategory> {
    let name = normalize_drug_name(drug_name);
    let found: BTreeSet<_> = DRUG_FAMILIES
        .iter()
        .filter(|(drug, _)| *drug == name)
        .map(|(_, cat)| *cat)
        .collect();
    if found.is_empty() {
        BTreeSet::from([Other])
    } else {
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lisinopril_is_ace_inhibitor() {
        assert_eq!(categorize_medication("Lisinopril"), BTreeSet::from([AceInhibitor]));
    }

    #[test]
    fn nifedipine_maps_to_both_families() {
        assert_eq!(
            categorize_medication("Nifedipine"),
            BTreeSet::from([CalciumChannelBlocker, Antihypertensive])
        );
    }

    #[test]
    fn unlisted_drug_is_other() {
        assert_eq!(categorize_medication("Aspirin"), BTreeSet::from([Other]));
        assert_eq!(categorize_medication(""), BTreeSet::from([Other]));
    }

    #[test]
    fn every_listed_drug_is_hypertensive() {
        for (drug, _) in DRUG_FAMILIES {
            let cats = categorize_medication(drug);
            assert!(!cats.contains(&Other), "{drug}");
        }
    }

    #[test]
    fn combination_products_ignore_spacing_and_case() {
        assert_eq!(
            categorize_medication("Hydrochlorothiazide / Losartan"),
            BTreeSet::from([Antihypertensive])
        );
        assert_eq!(
            categorize_medication("  HYDROCHLOROTHIAZIDE/lisinopril "),
            BTreeSet::from([Diuretic, Antihypertensive])
        );
    }
}
