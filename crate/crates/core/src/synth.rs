//! Seeded synthetic EHR generator.
//!
//! Two blood-pressure dynamics are available:
//!
//! * [`Dynamics::StatusChain`] (default): the controlled/uncontrolled status
//!   follows a two-state Markov chain whose transition logit is shifted by
//!   covariates observable at the previous visit. Readings are then drawn
//!   inside the band of their status, with their position in the band driven
//!   by an AR(1) latent. With all covariate effects at zero, the next status
//!   depends on nothing but the current one.
//! * [`Dynamics::Autoregressive`]: readings follow
//!   `bp_t = mu_i + phi (bp_{t-1} - mu_i) + covariates + noise` and the status
//!   is read off the values.
//!
//! Each patient draws from its own ChaCha stream, so output does not depend on
//! generation order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::cohort::{label_bp_status, BpStatus};
use crate::derive_seed;
use crate::ehr::{
    DiagnosisEvent, EncounterRecord, LabOrderEvent, MedicationEvent, PatientId, RawTables, Sex,
    VITAL_COLUMNS,
};
use crate::error::{Error, Result};
use crate::train::{parse_key_values, parse_value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    StatusChain,
    Autoregressive,
}

/// Generator parameters. Covariate effects are on the logit scale for the
/// status chain; the autoregressive mode multiplies the same signal by
/// `ar_covariate_mmhg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    pub mean_gap_days: f64,
    pub dynamics: Dynamics,
    pub phi: f64,
    pub noise_sd: f64,
    pub systolic_mean: f64,
    pub diastolic_mean: f64,
    pub patient_mean_sd: f64,
    pub stay_controlled: f64,
    pub stay_uncontrolled: f64,
    pub effect_age: f64,
    pub effect_bmi: f64,
    pub effect_smoking: f64,
    pub effect_medication: f64,
    pub effect_comorbidity: f64,
    pub effect_propensity: f64,
    pub effect_second_lag: f64,
    pub ar_covariate_mmhg: f64,
    pub bp_missing_rate: f64,
    pub demographic_missing_rate: f64,
    pub reading_error_rate: f64,
    pub deceased_rate: f64,
    pub age_out_of_range_rate: f64,
    pub no_vitals_rate: f64,
    pub start_date: NaiveDate,
    pub seed: u64,
}

/// Published default seed for the reference cohort.
pub const DEFAULT_SEED: u64 = 20_190_501;

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 5000,
            min_visits: 4,
            max_visits: 16,
            mean_gap_days: 36.0,
            dynamics: Dynamics::StatusChain,
            phi: 0.8,
            noise_sd: 10.0,
            systolic_mean: 133.0,
            diastolic_mean: 76.0,
            patient_mean_sd: 10.0,
            stay_controlled: 0.80,
            stay_uncontrolled: 0.60,
            effect_age: 0.5,
            effect_bmi: 0.3,
            effect_smoking: 0.6,
            effect_medication: 0.7,
            effect_comorbidity: 0.6,
            effect_propensity: 1.0,
            effect_second_lag: 0.6,
            ar_covariate_mmhg: 6.0,
            bp_missing_rate: 0.03,
            demographic_missing_rate: 0.02,
            reading_error_rate: 0.003,
            deceased_rate: 0.02,
            age_out_of_range_rate: 0.03,
            no_vitals_rate: 0.01,
            start_date: NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date"),
            seed: DEFAULT_SEED,
        }
    }
}

impl GeneratorConfig {
    /// Same cohort shape with every covariate effect removed.
    pub fn without_covariate_effects(&self) -> Self {
        GeneratorConfig {
            effect_age: 0.0,
            effect_bmi: 0.0,
            effect_smoking: 0.0,
            effect_medication: 0.0,
            effect_comorbidity: 0.0,
            effect_propensity: 0.0,
            effect_second_lag: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.min_visits < 1 || self.min_visits > self.max_visits {
            return bad("need 1 <= min_visits <= max_visits".into());
        }
        if !(self.mean_gap_days >= 1.0) {
            return bad("mean_gap_days must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.phi) {
            return bad("phi must lie in [0, 1)".into());
        }
        if !(self.noise_sd > 0.0) || !(self.patient_mean_sd >= 0.0) {
            return bad("noise_sd must be positive and patient_mean_sd non-negative".into());
        }
        for (name, p) in [
            ("stay_controlled", self.stay_controlled),
            ("stay_uncontrolled", self.stay_uncontrolled),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        for (name, p) in [
            ("bp_missing_rate", self.bp_missing_rate),
            ("demographic_missing_rate", self.demographic_missing_rate),
            ("reading_error_rate", self.reading_error_rate),
            ("deceased_rate", self.deceased_rate),
            ("age_out_of_range_rate", self.age_out_of_range_rate),
            ("no_vitals_rate", self.no_vitals_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        let effects = [
            self.effect_age,
            self.effect_bmi,
            self.effect_smoking,
            self.effect_medication,
            self.effect_comorbidity,
            self.effect_propensity,
            self.effect_second_lag,
            self.ar_covariate_mmhg,
        ];
        if effects.iter().any(|e| !e.is_finite()) {
            return bad("covariate effects must be finite".into());
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = GeneratorConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = |v: &str| parse_value::<f64>(key, v);
        match key {
            "n_patients" => self.n_patients = parse_value(key, value)?,
            "min_visits" => self.min_visits = parse_value(key, value)?,
            "max_visits" => self.max_visits = parse_value(key, value)?,
            "mean_gap_days" => self.mean_gap_days = f(value)?,
            "dynamics" => {
                self.dynamics = match value {
                    "status_chain" => Dynamics::StatusChain,
                    "autoregressive" => Dynamics::Autoregressive,
                    other => return Err(Error::InvalidConfig(format!("unknown dynamics `{other}`"))),
                }
            }
            "phi" => self.phi = f(value)?,
            "noise_sd" => self.noise_sd = f(value)?,
            "systolic_mean" => self.systolic_mean = f(value)?,
            "diastolic_mean" => self.diastolic_mean = f(value)?,
            "patient_mean_sd" => self.patient_mean_sd = f(value)?,
            "stay_controlled" => self.stay_controlled = f(value)?,
            "stay_uncontrolled" => self.stay_uncontrolled = f(value)?,
            "effect_age" => self.effect_age = f(value)?,
            "effect_bmi" => self.effect_bmi = f(value)?,
            "effect_smoking" => self.effect_smoking = f(value)?,
            "effect_medication" => self.effect_medication = f(value)?,
            "effect_comorbidity" => self.effect_comorbidity = f(value)?,
            "effect_propensity" => self.effect_propensity = f(value)?,
            "effect_second_lag" => self.effect_second_lag = f(value)?,
            "ar_covariate_mmhg" => self.ar_covariate_mmhg = f(value)?,
            "bp_missing_rate" => self.bp_missing_rate = f(value)?,
            "demographic_missing_rate" => self.demographic_missing_rate = f(value)?,
            "reading_error_rate" => self.reading_error_rate = f(value)?,
            "deceased_rate" => self.deceased_rate = f(value)?,
            "age_out_of_range_rate" => self.age_out_of_range_rate = f(value)?,
            "no_vitals_rate" => self.no_vitals_rate = f(value)?,
            "start_date" => {
                self.start_date = NaiveDate::parse_from_str(value, "%Y-%m-%d")
                    .map_err(|_| Error::InvalidConfig(format!("bad start_date `{value}`")))?
            }
            "seed" => self.seed = parse_value(key, value)?,
            "covariate_effects" => {
                if value == "off" || value == "zero" {
                    *self = self.without_covariate_effects();
                } else if value != "on" {
                    return Err(Error::InvalidConfig(format!("bad covariate_effects `{value}`")));
                }
            }
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

const RACES: [(&str, f64); 5] = [
    ("WHITE", 0.70),
    ("BLACK", 0.12),
    ("HISPANIC", 0.08),
    ("ASIAN", 0.06),
    ("OTHER", 0.04),
];
const MARITAL: [(&str, f64); 4] = [
    ("MARRIED", 0.52),
    ("SINGLE", 0.26),
    ("DIVORCED", 0.12),
    ("WIDOWED", 0.10),
];
const LANGUAGES: [(&str, f64); 3] = [("ENGLISH", 0.90), ("SPANISH", 0.07), ("OTHER", 0.03)];
const SMOKING: [(&str, f64); 3] = [("NEVER", 0.50), ("FORMER", 0.33), ("CURRENT", 0.17)];

/// Per-patient comorbidity prevalence; `N18` carries the comorbidity effect.
const COMORBIDITIES: [(&str, f64); 5] = [
    ("E11", 0.25),
    ("E78", 0.35),
    ("N18", 0.12),
    ("I50", 0.06),
    ("E66", 0.20),
];
const PRINCIPAL_CODE: &str = "I10";
const RISK_COMORBIDITY: &str = "N18";

/// Panels and their per-visit order probability.
const LAB_PANELS: [(&str, f64); 5] = [
    ("General Chemistries", 0.70),
    ("Lytes/Renal/Glucose", 0.30),
    ("Complete Blood Count", 0.15),
    ("Lipid Tests", 0.07),
    ("Thyroid Studies", 0.05),
];

const DRUGS: [&str; 10] = [
    "lisinopril",
    "hydrochlorothiazide",
    "amlodipine",
    "metoprolol",
    "losartan",
    "atenolol",
    "chlortalidone",
    "nifedipine",
    "hydralazine",
    "Hydrochlorothiazide / Lisinopril",
];

/// Vital name, mean, sd, missing rate (height in inches, weight in pounds).
const VITAL_SPECS: [(&str, f64, f64, f64); 6] = [
    ("pulse", 75.3, 13.6, 0.12),
    ("temperature", 97.9, 0.7, 0.51),
    ("respiratory_rate", 16.9, 2.5, 0.79),
    ("heart_rate", 79.4, 14.7, 0.98),
    ("fatigue", 1.7, 2.9, 0.97),
    ("height", 66.8, 3.9, 0.08),
];
const WEIGHT_MISSING: f64 = 0.40;
const BMI_MISSING: f64 = 0.62;

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, table: &[(&'a str, f64)]) -> &'a str {
    let mut u: f64 = rng.random();
    for &(name, p) in table {
        if u < p {
            return name;
        }
        u -= p;
    }
    table[table.len() - 1].0
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    crate::nnet::sigmoid(z)
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Value at quantile `u` of `N(mean, sd)` truncated to `[lo, hi]`, rounded to
/// an integer inside `[lo, hi]`.
fn banded(u: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let n = StdNormal::new(mean, sd).expect("valid normal");
    let (a, b) = (n.cdf(lo), n.cdf(hi));
    let q = (a + u * (b - a)).clamp(1e-12, 1.0 - 1e-12);
    n.inverse_cdf(q).round().clamp(lo, hi)
}

struct Patient {
    id: PatientId,
    sex: Sex,
    age0: f64,
    demographics: BTreeMap<String, String>,
    height: f64,
    bmi0: f64,
    comorbidities: Vec<&'static str>,
    drugs: Vec<&'static str>,
    propensity: f64,
    mu_sys: f64,
    mu_dia: f64,
    no_vitals: bool,
    deceased: bool,
}

fn draw_patient<R: Rng + ?Sized>(rng: &mut R, cfg: &GeneratorConfig, index: usize) -> Patient {
    let std = Normal::<f64>::new(0.0, 1.0).expect("valid normal");
    let sex = if rng.random_bool(0.43) { Sex::Male } else { Sex::Female };
    let age0 = if rng.random_bool(cfg.age_out_of_range_rate) {
        if rng.random_bool(0.5) {
            rng.random_range(12.0..17.0)
        } else {
            rng.random_range(91.0..97.0)
        }
    } else {
        (62.0 + 13.5 * std.sample(rng)).clamp(18.0, 87.0)
    };
    let mut demographics = BTreeMap::new();
    for (col, table) in [
        ("race", &RACES[..]),
        ("marital_status", &MARITAL[..]),
        ("language", &LANGUAGES[..]),
        ("smoking", &SMOKING[..]),
    ] {
        let value = pick(rng, table);
        if !rng.random_bool(cfg.demographic_missing_rate) {
            demographics.insert(col.to_string(), value.to_string());
        }
    }
    let height = (if sex == Sex::Male { 69.3 } else { 64.0 } + 2.8 * std.sample(rng)).clamp(56.0, 80.0);
    let bmi0 = (30.2 + 6.0 * std.sample(rng)).clamp(16.0, 55.0);
    let comorbidities = COMORBIDITIES
        .iter()
        .filter(|(_, p)| rng.random_bool(*p))
        .map(|(c, _)| *c)
        .collect();
    let drugs = if rng.random_bool(0.6) {
        let k = rng.random_range(1..=3);
        let mut d: Vec<&'static str> = DRUGS.choose_multiple(rng, k).copied().collect();
        d.sort_unstable();
        d
    } else {
        Vec::new()
    };
    Patient {
        id: PatientId::new(format!("P{:06}", index + 1)).expect("non-empty id"),
        sex,
        age0,
        demographics,
        height,
        bmi0,
        comorbidities,
        drugs,
        propensity: std.sample(rng),
        mu_sys: cfg.systolic_mean + cfg.patient_mean_sd * std.sample(rng),
        mu_dia: cfg.diastolic_mean + 0.6 * cfg.patient_mean_sd * std.sample(rng),
        no_vitals: rng.random_bool(cfg.no_vitals_rate),
        deceased: rng.random_bool(cfg.deceased_rate),
    }
}

/// Covariates seen at one visit, feeding the next visit's transition.
struct VisitState {
    age: f64,
    bmi: f64,
    on_medication: bool,
}

fn covariate_signal(cfg: &GeneratorConfig, p: &Patient, prev: &VisitState, second_lag: Option<BpStatus>) -> f64 {
    let smoker = p.demographics.get("smoking").is_some_and(|s| s == "CURRENT");
    let comorbid = p.comorbidities.contains(&RISK_COMORBIDITY);
    let lag2 = second_lag.map_or(0.0, |s| s.as_f64() - 0.34);
    cfg.effect_age * (prev.age - 62.0) / 13.5
        + cfg.effect_bmi * (prev.bmi - 30.2) / 6.0
        + cfg.effect_smoking * f64::from(u8::from(smoker))
        - cfg.effect_medication * f64::from(u8::from(prev.on_medication))
        + cfg.effect_comorbidity * f64::from(u8::from(comorbid))
        + cfg.effect_propensity * p.propensity
        + cfg.effect_second_lag * lag2
}

/// Generates the four tables. Deterministic in `cfg`.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<RawTables> {
    cfg.validate()?;
    let mut out = RawTables::default();
    for i in 0..cfg.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("patient:{i}")));
        generate_patient(cfg, i, &mut rng, &mut out);
    }
    Ok(out)
}

fn generate_patient(cfg: &GeneratorConfig, index: usize, rng: &mut ChaCha8Rng, out: &mut RawTables) {
    let std = Normal::<f64>::new(0.0, 1.0).expect("valid normal");
    let gap = Exp::new(1.0 / (cfg.mean_gap_days - 1.0).max(1e-9)).expect("valid rate");
    let p = draw_patient(rng, cfg, index);
    let n_visits = rng.random_range(cfg.min_visits..=cfg.max_visits);
    let mut date = cfg.start_date + Duration::days(rng.random_range(0..365));
    let first_date = date;

    let persistence_intercept = logit(1.0 - cfg.stay_controlled);
    let persistence_slope = logit(cfg.stay_uncontrolled) - persistence_intercept;
    let stationary = (1.0 - cfg.stay_controlled) / (2.0 - cfg.stay_controlled - cfg.stay_uncontrolled);
    let innovation = (1.0 - cfg.phi * cfg.phi).sqrt();

    let mut statuses: Vec<BpStatus> = Vec::with_capacity(n_visits);
    let mut prev_state: Option<VisitState> = None;
    let (mut z_sys, mut z_dia) = (std.sample(rng), std.sample(rng));
    let (mut sys_prev, mut dia_prev) = (0.0, 0.0);

    for v in 0..n_visits {
        if v > 0 {
            date += Duration::days(1 + gap.sample(rng).round() as i64);
        }
        let age = round1(p.age0 + (date - first_date).num_days() as f64 / 365.25);
        let bmi = (p.bmi0 + 0.5 * std.sample(rng)).clamp(14.0, 60.0);
        let signal = prev_state
            .as_ref()
            .map_or(0.0, |s| covariate_signal(cfg, &p, s, statuses.len().checked_sub(2).map(|j| statuses[j])));

        let (sys, dia) = match cfg.dynamics {
            Dynamics::StatusChain => {
                let z = match statuses.last() {
                    None => logit(stationary) + signal,
                    Some(s) => persistence_intercept + persistence_slope * s.as_f64() + signal,
                };
                let status = BpStatus::from_bool(rng.random_bool(sigmoid(z)));
                statuses.push(status);
                z_sys = cfg.phi * z_sys + innovation * std.sample(rng);
                z_dia = cfg.phi * z_dia + innovation * std.sample(rng);
                let (u_s, u_d) = (
                    StdNormal::standard().cdf(z_sys),
                    StdNormal::standard().cdf(z_dia),
                );
                match status {
                    BpStatus::Controlled => (
                        banded(u_s, 124.0, 9.0, 92.0, 139.0),
                        banded(u_d, 73.0, 7.0, 62.0, 89.0),
                    ),
                    BpStatus::Uncontrolled => {
                        if rng.random_bool(0.85) {
                            (banded(u_s, 148.0, 10.0, 140.0, 220.0), banded(u_d, 82.0, 9.0, 62.0, 125.0))
                        } else {
                            (banded(u_s, 132.0, 6.0, 110.0, 139.0), banded(u_d, 93.0, 4.0, 90.0, 125.0))
                        }
                    }
                }
            }
            Dynamics::Autoregressive => {
                let (sys, dia) = if v == 0 {
                    let stationary_sd = cfg.noise_sd / innovation;
                    (
                        p.mu_sys + stationary_sd * std.sample(rng),
                        p.mu_dia + 0.6 * stationary_sd * std.sample(rng),
                    )
                } else {
                    let shift = cfg.ar_covariate_mmhg * signal;
                    (
                        p.mu_sys + cfg.phi * (sys_prev - p.mu_sys) + shift + cfg.noise_sd * std.sample(rng),
                        p.mu_dia
                            + cfg.phi * (dia_prev - p.mu_dia)
                            + 0.5 * shift
                            + 0.6 * cfg.noise_sd * std.sample(rng),
                    )
                };
                sys_prev = sys;
                dia_prev = dia;
                let (s, d) = (round1(sys).max(1.0), round1(dia).max(1.0));
                statuses.push(label_bp_status(s, d));
                (s, d)
            }
        };

        let on_medication = !p.drugs.is_empty() && rng.random_bool(0.8);
        let mut record_bp = !rng.random_bool(cfg.bp_missing_rate);
        let (mut sys_out, mut dia_out) = (sys, dia);
        if rng.random_bool(cfg.reading_error_rate) {
            sys_out = rng.random_range(60.0f64..89.0).round();
            dia_out = rng.random_range(30.0f64..59.0).round();
            record_bp = true;
        }

        let mut vitals = BTreeMap::new();
        if !p.no_vitals {
            for &(name, mean, sd, missing) in &VITAL_SPECS {
                if rng.random_bool(missing) {
                    continue;
                }
                let value = match name {
                    "height" => round1(p.height + 0.3 * std.sample(rng)),
                    "fatigue" => (mean + sd * std.sample(rng)).round().clamp(0.0, 10.0),
                    _ => round1((mean + sd * std.sample(rng)).max(1.0)),
                };
                vitals.insert(name.to_string(), value);
            }
            let weight = bmi * p.height * p.height / 703.0;
            if !rng.random_bool(WEIGHT_MISSING) {
                vitals.insert("weight".into(), round1(weight));
            }
            if !rng.random_bool(BMI_MISSING) {
                vitals.insert("bmi".into(), round1(bmi));
            }
        } else {
            record_bp = false;
        }
        debug_assert!(vitals.keys().all(|k| VITAL_COLUMNS.contains(&k.as_str())));

        out.encounters.push(EncounterRecord {
            patient: p.id.clone(),
            date,
            systolic: record_bp.then_some(sys_out),
            diastolic: record_bp.then_some(dia_out),
            vitals,
            diagnosis_code: Some(PRINCIPAL_CODE.to_string()),
            sex: p.sex,
            age,
            demographics: p.demographics.clone(),
            deceased: p.deceased && v + 1 == n_visits,
        });
        if on_medication {
            for d in &p.drugs {
                out.medications.push(MedicationEvent {
                    patient: p.id.clone(),
                    date,
                    drug_name: d.to_string(),
                });
            }
        }
        for &(panel, prob) in &LAB_PANELS {
            if rng.random_bool(prob) {
                out.labs.push(LabOrderEvent {
                    patient: p.id.clone(),
                    date,
                    panel_name: panel.to_string(),
                });
            }
        }
        out.diagnoses.push(DiagnosisEvent {
            patient: p.id.clone(),
            date,
            code: PRINCIPAL_CODE.to_string(),
            is_principal: true,
        });
        for c in &p.comorbidities {
            if rng.random_bool(0.5) {
                out.diagnoses.push(DiagnosisEvent {
                    patient: p.id.clone(),
                    date,
                    code: c.to_string(),
                    is_principal: false,
                });
            }
        }
        prev_state = Some(VisitState {
            age,
            bmi,
            on_medication,
        });
    }
}

/// One row of the population summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub variable: String,
    pub count: usize,
    /// `None` when the variable is never observed.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub missing: f64,
}

fn summarize(variable: &str, values: &[f64], rows: usize) -> VariableSummary {
    let count = values.len();
    let (mean, std) = if count == 0 {
        (None, None)
    } else {
        let m = values.iter().sum::<f64>() / count as f64;
        let var = if count > 1 {
            values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        (Some(m), Some(var.sqrt()))
    };
    VariableSummary {
        variable: variable.to_string(),
        count,
        mean,
        std,
        missing: if rows == 0 { 1.0 } else { 1.0 - count as f64 / rows as f64 },
    }
}

/// Count, mean, sample std and missing fraction per encounter variable,
/// plus the per-visit order rate of every lab panel.
pub fn population_summary(
    encounters: &[EncounterRecord],
    labs: &[LabOrderEvent],
) -> Vec<VariableSummary> {
    let rows = encounters.len();
    let mut out = Vec::new();
    let column = |f: &dyn Fn(&EncounterRecord) -> Option<f64>| -> Vec<f64> {
        encounters.iter().filter_map(f).collect()
    };
    out.push(summarize("systolic", &column(&|r| r.systolic), rows));
    out.push(summarize("diastolic", &column(&|r| r.diastolic), rows));
    for v in VITAL_COLUMNS {
        out.push(summarize(v, &column(&|r| r.vital(v)), rows));
    }
    out.push(summarize("age", &column(&|r| Some(r.age)), rows));
    out.push(summarize(
        "sex_male",
        &column(&|r| Some(f64::from(u8::from(r.sex == Sex::Male)))),
        rows,
    ));
    let mut by_patient: BTreeMap<&PatientId, Vec<NaiveDate>> = BTreeMap::new();
    for r in encounters {
        by_patient.entry(&r.patient).or_default().push(r.date);
    }
    let mut deltas = Vec::new();
    for dates in by_patient.values_mut() {
        dates.sort_unstable();
        deltas.extend(dates.windows(2).map(|w| (w[1] - w[0]).num_days() as f64));
    }
    out.push(summarize("delta_days", &deltas, deltas.len()));
    let visits: BTreeSet<(&PatientId, NaiveDate)> = encounters.iter().map(|r| (&r.patient, r.date)).collect();
    let mut panels: BTreeMap<&str, BTreeSet<(&PatientId, NaiveDate)>> = BTreeMap::new();
    for l in labs {
        panels.entry(&l.panel_name).or_default().insert((&l.patient, l.date));
    }
    for (panel, ordered) in panels {
        let hits = vec![1.0; ordered.intersection(&visits).count()];
        out.push(summarize(&format!("lab:{panel}"), &hits, visits.len()));
    }
    out
}

pub fn write_population_summary<W: Write>(writer: W, rows: &[VariableSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "count", "mean", "std", "missing"])?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
    for r in rows {
        w.write_record([
            r.variable.clone(),
            r.count.to_string(),
            opt(r.mean),
            opt(r.std),
            r.missing.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<population summary>", e))?;
    Ok(())
}
