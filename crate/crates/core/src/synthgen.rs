//! Deterministic synthetic raw exports in the MIMIC-IV, eICU and MC-MED
//! layouts read by [`crate::ingest`], with a ground-truth manifest that lists
//! every emitted measurement.
//!
//! The cohort skeleton (patients, stays, outcomes, attributes, codes) is drawn
//! from ChaCha8 stream 0 of the seed; measurements of stay `i` come from
//! stream `i + 1`, so the skeleton can be rebuilt cheaply.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::artifacts::npy::{write_npy, FileDigest};
use crate::config::Dataset;
use crate::error::{Error, Result};
use crate::ingest::{eicu, mcmed, mimiciv, ItemDictionary};
use crate::staticfeat::{radiology_sidecar, RADIOLOGY_EMBEDDINGS};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

const EICU_PERIODIC: [&str; 16] = [
    "temperature",
    "sao2",
    "heartrate",
    "respiration",
    "cvp",
    "etco2",
    "systemicsystolic",
    "systemicdiastolic",
    "systemicmean",
    "pasystolic",
    "padiastolic",
    "pamean",
    "st1",
    "st2",
    "st3",
    "icp",
];
const EICU_APERIODIC: [&str; 8] = [
    "noninvasivesystolic",
    "noninvasivediastolic",
    "noninvasivemean",
    "paop",
    "cardiacoutput",
    "cardiacinput",
    "svr",
    "pvr",
];
const MCMED_NUMERICS: [&str; 8] = ["HR", "RR", "SpO2", "SBP", "DBP", "MAP", "Temp", "Pulse"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaysPerPatient {
    pub min: u32,
    pub max: u32,
}

impl Default for StaysPerPatient {
    fn default() -> Self {
        StaysPerPatient { min: 1, max: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub sampling_rate_per_hour: f64,
    pub missing_prob: f64,
    pub mean: f64,
    pub sd: f64,
}

impl FeatureSpec {
    pub fn new(name: &str, rate: f64, missing_prob: f64, mean: f64, sd: f64) -> Self {
        FeatureSpec {
            name: name.to_string(),
            sampling_rate_per_hour: rate,
            missing_prob,
            mean,
            sd,
        }
    }
}

/// Generating parameters of a synthetic raw export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dataset_name: Dataset,
    pub n_patients: usize,
    #[serde(default)]
    pub stays_per_patient: StaysPerPatient,
    /// Probability of the event for single-risk datasets.
    pub event_rate: f64,
    pub mean_duration_hours: f64,
    pub features: Vec<FeatureSpec>,
    /// Probabilities of event codes `1..=4` (mcmed only); the rest is censored.
    #[serde(default)]
    pub competing_risk_mix: Option<Vec<f64>>,
    pub seed: u64,
    /// Hours after admission during which measurements are emitted.
    #[serde(default)]
    pub observation_hours: Option<u32>,
    /// Durations are redrawn while above five times this horizon.
    #[serde(default)]
    pub horizon_hours: Option<f64>,
    /// Also emit radiology embeddings of this width.
    #[serde(default)]
    pub radiology_dim: Option<usize>,
    #[serde(default)]
    pub icd_vocab_size: Option<usize>,
}

pub fn parse_spec(text: &str) -> Result<SyntheticSpec> {
    let spec: SyntheticSpec =
        serde_yaml::from_str(text).map_err(|e| Error::SpecInvalid(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec(&text)
}

fn spec_invalid(msg: impl Into<String>) -> Error {
    Error::SpecInvalid(msg.into())
}

impl SyntheticSpec {
    /// A spec with a representative feature set for `dataset`.
    pub fn example(dataset: Dataset, n_patients: usize, seed: u64) -> Self {
        let f = FeatureSpec::new;
        let (features, mix, mean_duration) = match dataset {
            Dataset::Mimiciv => (
                vec![
                    f("heart_rate", 1.0, 0.05, 85.0, 15.0),
                    f("respiratory_rate", 1.0, 0.1, 18.0, 4.0),
                    f("spo2", 1.0, 0.1, 96.0, 2.5),
                    f("sbp_noninvasive", 0.5, 0.3, 120.0, 18.0),
                    f("dbp_noninvasive", 0.5, 0.3, 65.0, 10.0),
                    f("temperature_c", 0.25, 0.5, 37.0, 0.6),
                    f("creatinine", 0.1, 0.6, 1.2, 0.5),
                    f("glucose", 0.15, 0.5, 130.0, 35.0),
                    f("potassium", 0.1, 0.6, 4.1, 0.5),
                    f("lactate", 0.05, 0.95, 2.0, 1.0),
                    f("inr", 0.05, 0.999, 1.3, 0.3),
                ],
                None,
                90.0,
            ),
            Dataset::Eicu => (
                vec![
                    f("heartrate", 1.0, 0.05, 88.0, 16.0),
                    f("respiration", 1.0, 0.1, 19.0, 5.0),
                    f("sao2", 1.0, 0.1, 96.0, 3.0),
                    f("temperature", 0.5, 0.4, 37.0, 0.6),
                    f("systemicmean", 0.5, 0.7, 80.0, 12.0),
                    f("noninvasivesystolic", 0.5, 0.3, 122.0, 20.0),
                    f("noninvasivediastolic", 0.5, 0.3, 66.0, 11.0),
                    f("glucose", 0.15, 0.5, 135.0, 40.0),
                    f("creatinine", 0.1, 0.6, 1.3, 0.6),
                    f("potassium", 0.1, 0.6, 4.0, 0.5),
                    f("troponin - I", 0.05, 0.999, 0.4, 0.3),
                ],
                None,
                80.0,
            ),
            Dataset::Mcmed => (
                vec![
                    f("HR", 2.0, 0.05, 90.0, 18.0),
                    f("RR", 2.0, 0.1, 18.0, 4.0),
                    f("SpO2", 2.0, 0.1, 97.0, 2.0),
                    f("SBP", 1.0, 0.2, 130.0, 20.0),
                    f("DBP", 1.0, 0.2, 75.0, 12.0),
                    f("Temp", 0.5, 0.5, 36.9, 0.5),
                    f("Glucose", 0.3, 0.6, 120.0, 30.0),
                    f("Sodium", 0.3, 0.6, 139.0, 3.0),
                    f("Lactate", 0.1, 0.999, 2.2, 1.0),
                ],
                Some(vec![0.4, 0.3, 0.08, 0.02]),
                8.0,
            ),
        };
        SyntheticSpec {
            dataset_name: dataset,
            n_patients,
            stays_per_patient: StaysPerPatient { min: 1, max: 3 },
            event_rate: 0.1,
            mean_duration_hours: mean_duration,
            features,
            competing_risk_mix: mix,
            seed,
            observation_hours: None,
            horizon_hours: None,
            radiology_dim: None,
            icd_vocab_size: None,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_hours
            .unwrap_or_else(|| f64::from(self.dataset_name.default_horizon_hours()))
    }

    pub fn observation_hours(&self) -> u32 {
        self.observation_hours
            .unwrap_or(2 * self.dataset_name.default_max_hours())
    }

    pub fn icd_vocab_size(&self) -> usize {
        self.icd_vocab_size.unwrap_or(50)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(spec_invalid("n_patients must be positive"));
        }
        let s = self.stays_per_patient;
        if s.min == 0 || s.min > s.max {
            return Err(spec_invalid(format!(
                "stays_per_patient needs 1 <= min <= max, got {}..{}",
                s.min, s.max
            )));
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return Err(spec_invalid(format!(
                "event_rate must lie in [0, 1], got {}",
                self.event_rate
            )));
        }
        if !(self.mean_duration_hours > 0.0) || !self.mean_duration_hours.is_finite() {
            return Err(spec_invalid("mean_duration_hours must be positive"));
        }
        if let Some(h) = self.horizon_hours {
            if !(h > 0.0) || !h.is_finite() {
                return Err(spec_invalid("horizon_hours must be positive"));
            }
        }
        if self.observation_hours == Some(0) {
            return Err(spec_invalid("observation_hours must be positive"));
        }
        if self.radiology_dim == Some(0) {
            return Err(spec_invalid("radiology_dim must be positive"));
        }
        if self.icd_vocab_size == Some(0) {
            return Err(spec_invalid("icd_vocab_size must be positive"));
        }
        match (self.dataset_name, &self.competing_risk_mix) {
            (Dataset::Mcmed, None) => {
                return Err(spec_invalid("competing_risk_mix is required for mcmed"))
            }
            (Dataset::Mcmed, Some(mix)) => {
                if mix.len() != 4 {
                    return Err(spec_invalid(format!(
                        "competing_risk_mix needs 4 entries, got {}",
                        mix.len()
                    )));
                }
                if mix.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                    return Err(spec_invalid("competing_risk_mix entries must be >= 0"));
                }
                if mix.iter().sum::<f64>() > 1.0 + 1e-12 {
                    return Err(spec_invalid("competing_risk_mix must sum to at most 1"));
                }
            }
            (_, Some(_)) => {
                return Err(spec_invalid(
                    "competing_risk_mix is only allowed for mcmed",
                ))
            }
            (_, None) => {}
        }
        let mut names = BTreeSet::new();
        let dict = ItemDictionary::bundled();
        for f in &self.features {
            if f.name.trim().is_empty() || f.name.trim() != f.name {
                return Err(spec_invalid(format!("bad feature name '{}'", f.name)));
            }
            if !names.insert(f.name.as_str()) {
                return Err(spec_invalid(format!("duplicate feature '{}'", f.name)));
            }
            if !(0.0..=1.0).contains(&f.missing_prob) {
                return Err(spec_invalid(format!(
                    "missing_prob of '{}' must lie in [0, 1]",
                    f.name
                )));
            }
            if !(f.sampling_rate_per_hour >= 0.0) || !f.sampling_rate_per_hour.is_finite() {
                return Err(spec_invalid(format!(
                    "sampling_rate_per_hour of '{}' must be >= 0",
                    f.name
                )));
            }
            if !f.mean.is_finite() || !(f.sd >= 0.0) || !f.sd.is_finite() {
                return Err(spec_invalid(format!(
                    "mean/sd of '{}' must be finite with sd >= 0",
                    f.name
                )));
            }
            if self.dataset_name == Dataset::Mimiciv && dict.lookup_name(&f.name).is_none() {
                return Err(spec_invalid(format!(
                    "'{}' is not in the MIMIC-IV item dictionary",
                    f.name
                )));
            }
        }
        Ok(())
    }
}

/// One emitted raw measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub feature: String,
    pub offset_minutes: i64,
    pub value: f64,
}

/// Ground truth of one emitted stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayTruth {
    pub subject_id: String,
    pub stay_id: String,
    pub duration_minutes: i64,
    pub duration_hours: f64,
    /// Generated event code, before any horizon truncation.
    pub event: u8,
    /// Outcome string as written; empty when the outcome was not recorded.
    pub raw_outcome: String,
    pub raw_age: String,
    pub attributes: BTreeMap<String, String>,
    pub icd_codes: Vec<String>,
    pub measurements: Vec<Measurement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dataset: Dataset,
    pub seed: u64,
    pub horizon_hours: f64,
    pub observation_hours: u32,
    pub features: Vec<FeatureSpec>,
    /// Stays in raw stay-file order.
    pub stays: Vec<StayTruth>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    pub fn num_measurements(&self) -> usize {
        self.stays.iter().map(|s| s.measurements.len()).sum()
    }
}

fn pick<'a, R: Rng>(rng: &mut R, table: &[(&'a str, f64)]) -> &'a str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (name, p) in table {
        acc += p;
        if u < acc {
            return name;
        }
    }
    table.last().map(|(n, _)| *n).unwrap_or("")
}

/// Empty with probability 2%, otherwise a draw from `table`.
fn attribute<R: Rng>(rng: &mut R, table: &[(&str, f64)]) -> String {
    if rng.random::<f64>() < 0.02 {
        rng.random::<f64>();
        String::new()
    } else {
        pick(rng, table).to_string()
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn age_string<R: Rng>(rng: &mut R, dataset: Dataset) -> String {
    let age: u32 = rng.random_range(15..=95);
    if age >= 90 {
        match dataset {
            Dataset::Mimiciv => "greater than 89".into(),
            Dataset::Eicu => "> 89".into(),
            Dataset::Mcmed => "90+".into(),
        }
    } else {
        age.to_string()
    }
}

fn icd_token(dataset: Dataset, i: usize) -> String {
    match dataset {
        Dataset::Mimiciv if i % 2 == 0 => format!("I{}", 10 + i),
        Dataset::Mimiciv => format!("{}{}", 400 + i, i % 10),
        Dataset::Eicu => format!("{}.{}, I{}.{}", 400 + i, i % 10, 10 + i, i % 7),
        Dataset::Mcmed => format!("I{}.{}", 10 + i, i % 7),
    }
}

/// Cohort skeleton: everything except measurements.
fn skeleton(spec: &SyntheticSpec) -> Vec<StayTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ds = spec.dataset_name;
    let horizon = spec.horizon();
    let exp = Exp::new(1.0 / spec.mean_duration_hours).expect("positive rate");
    let vocab = spec.icd_vocab_size();
    let zipf_total: f64 = (1..=vocab).map(|r| 1.0 / r as f64).sum();
    let mut stays = Vec::new();
    for p in 0..spec.n_patients {
        let n_stays = rng.random_range(spec.stays_per_patient.min..=spec.stays_per_patient.max);
        let patient_age = age_string(&mut rng, ds);
        let patient_gender = attribute(&mut rng, &[("F", 0.45), ("M", 0.55)]);
        for _ in 0..n_stays {
            let idx = stays.len();
            let mut hours = exp.sample(&mut rng);
            while hours > 5.0 * horizon {
                hours = exp.sample(&mut rng);
            }
            let duration_minutes = ((hours * 60.0).round() as i64).max(1);
            let (event, mut raw_outcome) = outcome(&mut rng, spec);
            if rng.random::<f64>() < 0.01 {
                raw_outcome.clear();
            }
            let (subject_id, stay_id, raw_age, attributes) = match ds {
                Dataset::Mimiciv => (
                    (10_000_000 + p).to_string(),
                    (30_000_000 + idx).to_string(),
                    patient_age.clone(),
                    BTreeMap::from([
                        (
                            "admission_type".to_string(),
                            attribute(
                                &mut rng,
                                &[
                                    ("EW EMER.", 0.45),
                                    ("URGENT", 0.2),
                                    ("ELECTIVE", 0.15),
                                    ("OBSERVATION ADMIT", 0.15),
                                    ("DIRECT EMER.", 0.045),
                                    ("AMBULATORY OBSERVATION", 0.005),
                                ],
                            ),
                        ),
                        (
                            "first_careunit".to_string(),
                            attribute(
                                &mut rng,
                                &[
                                    ("Medical Intensive Care Unit (MICU)", 0.3),
                                    ("Surgical Intensive Care Unit (SICU)", 0.2),
                                    ("Cardiac Vascular Intensive Care Unit (CVICU)", 0.2),
                                    ("Coronary Care Unit (CCU)", 0.15),
                                    ("Trauma SICU (TSICU)", 0.145),
                                    ("Neuro Surgical Intensive Care Unit (Neuro SICU)", 0.005),
                                ],
                            ),
                        ),
                        ("gender".to_string(), patient_gender.clone()),
                        (
                            "race".to_string(),
                            attribute(
                                &mut rng,
                                &[
                                    ("WHITE", 0.6),
                                    ("BLACK/AFRICAN AMERICAN", 0.15),
                                    ("HISPANIC/LATINO - PUERTO RICAN", 0.08),
                                    ("ASIAN", 0.05),
                                    ("OTHER", 0.07),
                                    ("UNKNOWN", 0.045),
                                    ("AMERICAN INDIAN/ALASKA NATIVE", 0.005),
                                ],
                            ),
                        ),
                    ]),
                ),
                Dataset::Eicu => (
                    (200_000 + p).to_string(),
                    (100_000 + idx).to_string(),
                    age_string(&mut rng, ds),
                    BTreeMap::from([
                        (
                            "gender".to_string(),
                            attribute(
                                &mut rng,
                                &[("Female", 0.46), ("Male", 0.535), ("Unknown", 0.005)],
                            ),
                        ),
                        (
                            "ethnicity".to_string(),
                            attribute(
                                &mut rng,
                                &[
                                    ("Caucasian", 0.7),
                                    ("African American", 0.11),
                                    ("Hispanic", 0.06),
                                    ("Asian", 0.04),
                                    ("Other/Unknown", 0.085),
                                    ("Native American", 0.005),
                                ],
                            ),
                        ),
                        (
                            "unittype".to_string(),
                            attribute(
                                &mut rng,
                                &[
                                    ("Med-Surg ICU", 0.5),
                                    ("MICU", 0.1),
                                    ("CCU-CTICU", 0.1),
                                    ("SICU", 0.1),
                                    ("Neuro ICU", 0.1),
                                    ("CSICU", 0.05),
                                    ("CTICU", 0.045),
                                    ("Cardiac ICU", 0.005),
                                ],
                            ),
                        ),
                    ]),
                ),
                Dataset::Mcmed => (
                    (900_000 + p).to_string(),
                    (500_000 + idx).to_string(),
                    age_string(&mut rng, ds),
                    BTreeMap::from([
                        (
                            "gender".to_string(),
                            attribute(&mut rng, &[("F", 0.52), ("M", 0.48)]),
                        ),
                        (
                            "race".to_string(),
                            attribute(
                                &mut rng,
                                &[
                                    ("White", 0.5),
                                    ("Black or African American", 0.15),
                                    ("Asian", 0.15),
                                    ("Other", 0.1),
                                    ("Unknown", 0.095),
                                    ("Native Hawaiian or Other Pacific Islander", 0.005),
                                ],
                            ),
                        ),
                        (
                            "triage_acuity".to_string(),
                            attribute(
                                &mut rng,
                                &[
                                    ("1-Resuscitation", 0.02),
                                    ("2-Emergent", 0.3),
                                    ("3-Urgent", 0.5),
                                    ("4-Semi-Urgent", 0.15),
                                    ("5-Non-Urgent", 0.03),
                                ],
                            ),
                        ),
                    ]),
                ),
            };
            let n_codes = 1 + Poisson::new(2.0).expect("positive mean").sample(&mut rng) as usize;
            let mut codes = BTreeSet::new();
            for _ in 0..n_codes {
                let mut u = rng.random::<f64>() * zipf_total;
                let mut rank = 0;
                while rank + 1 < vocab && u >= 1.0 / (rank + 1) as f64 {
                    u -= 1.0 / (rank + 1) as f64;
                    rank += 1;
                }
                codes.insert(rank);
            }
            stays.push(StayTruth {
                subject_id,
                stay_id,
                duration_minutes,
                duration_hours: duration_minutes as f64 / 60.0,
                event,
                raw_outcome,
                raw_age,
                attributes,
                icd_codes: codes.into_iter().map(|i| icd_token(ds, i)).collect(),
                measurements: vec![],
            });
        }
    }
    stays
}

fn outcome<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> (u8, String) {
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    match spec.dataset_name {
        Dataset::Mimiciv => {
            if u < spec.event_rate {
                (1, "DIED".into())
            } else {
                let alive = ["HOME", "HOME HEALTH CARE", "SKILLED NURSING FACILITY", "REHAB"];
                (0, alive[(v * alive.len() as f64) as usize % alive.len()].into())
            }
        }
        Dataset::Eicu => {
            if u < spec.event_rate {
                (1, "Expired".into())
            } else {
                (0, "Alive".into())
            }
        }
        Dataset::Mcmed => {
            let mix = spec.competing_risk_mix.as_deref().unwrap_or(&[]);
            let names = ["Home", "Ward", "ICU", "Death"];
            let mut acc = 0.0;
            for (k, p) in mix.iter().enumerate() {
                acc += p;
                if u < acc {
                    return (k as u8 + 1, names[k].into());
                }
            }
            let censored = ["LWBS", "AMA", "Transfer"];
            (0, censored[(v * censored.len() as f64) as usize % censored.len()].into())
        }
    }
}

/// Measurement route of a feature for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    Chart,
    Lab,
    Periodic,
    Aperiodic,
    Numerics,
}

fn route(dataset: Dataset, name: &str, dict: &ItemDictionary) -> Route {
    match dataset {
        Dataset::Mimiciv => match dict.lookup_name(name) {
            Some((_, "labevents")) => Route::Lab,
            _ => Route::Chart,
        },
        Dataset::Eicu if EICU_PERIODIC.contains(&name) => Route::Periodic,
        Dataset::Eicu if EICU_APERIODIC.contains(&name) => Route::Aperiodic,
        Dataset::Eicu => Route::Lab,
        Dataset::Mcmed if MCMED_NUMERICS.contains(&name) => Route::Numerics,
        Dataset::Mcmed => Route::Lab,
    }
}

fn fill_measurements(spec: &SyntheticSpec, stay_index: usize, stay: &mut StayTruth, routes: &[Route]) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stay_index as u64 + 1);
    let obs_minutes = i64::from(spec.observation_hours()) * 60;
    let limit = obs_minutes.min(stay.duration_minutes);
    let mut out = Vec::new();
    for (f, feat) in spec.features.iter().enumerate() {
        let normal = Normal::new(feat.mean, feat.sd).expect("validated sd");
        let poisson = (feat.sampling_rate_per_hour > 0.0)
            .then(|| Poisson::new(feat.sampling_rate_per_hour).expect("positive rate"));
        if routes[f] == Route::Lab && feat.missing_prob < 1.0 && rng.random::<f64>() < 0.02 {
            let minute = -rng.random_range(1..=600i64);
            out.push((minute, f, round2(normal.sample(&mut rng))));
        }
        let Some(poisson) = poisson else { continue };
        let mut hour = 0i64;
        while hour * 60 < limit {
            let missing = rng.random::<f64>() < feat.missing_prob;
            if !missing {
                let count = poisson.sample(&mut rng) as usize;
                for _ in 0..count {
                    let minute = hour * 60 + rng.random_range(0..60i64);
                    let value = round2(normal.sample(&mut rng));
                    if minute < limit {
                        out.push((minute, f, value));
                    }
                }
            }
            hour += 1;
        }
    }
    out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    stay.measurements = out
        .into_iter()
        .map(|(minute, f, value)| Measurement {
            feature: spec.features[f].name.clone(),
            offset_minutes: minute,
            value,
        })
        .collect();
}

/// Builds the complete synthetic world in memory.
pub fn plan(spec: &SyntheticSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let dict = ItemDictionary::bundled();
    let routes: Vec<Route> = spec
        .features
        .iter()
        .map(|f| route(spec.dataset_name, &f.name, &dict))
        .collect();
    let mut stays = skeleton(spec);
    for (i, stay) in stays.iter_mut().enumerate() {
        fill_measurements(spec, i, stay, &routes);
    }
    Ok(GroundTruth {
        dataset: spec.dataset_name,
        seed: spec.seed,
        horizon_hours: spec.horizon(),
        observation_hours: spec.observation_hours(),
        features: spec.features.clone(),
        stays,
    })
}

fn csv_writer(out_dir: &Path, rel: &str) -> Result<(csv::Writer<File>, PathBuf)> {
    let path = out_dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    Ok((w, path))
}

struct Sink {
    w: csv::Writer<File>,
    path: PathBuf,
}

impl Sink {
    fn open(out_dir: &Path, rel: &str, header: &[&str]) -> Result<Self> {
        let (w, path) = csv_writer(out_dir, rel)?;
        let mut s = Sink { w, path };
        s.row(header)?;
        Ok(s)
    }

    fn row<I, T>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.w
            .write_record(fields)
            .map_err(|e| Error::csv(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes the raw CSV tree and `ground_truth.json` into `out_dir`, plus
/// radiology embeddings when `spec.radiology_dim` is set.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<GroundTruth> {
    let truth = plan(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match spec.dataset_name {
        Dataset::Mimiciv => write_mimiciv(&truth, out_dir)?,
        Dataset::Eicu => write_eicu(&truth, out_dir)?,
        Dataset::Mcmed => write_mcmed(&truth, out_dir)?,
    }
    let gt_path = out_dir.join(GROUND_TRUTH_FILE);
    let file = File::create(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &truth)?;
    w.flush().map_err(|e| Error::io(&gt_path, e))?;
    if let Some(dim) = spec.radiology_dim {
        emit_radiology_embeddings(spec, dim, &out_dir.join(RADIOLOGY_EMBEDDINGS))?;
    }
    Ok(truth)
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

fn mimic_base() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2150, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

fn write_mimiciv(truth: &GroundTruth, out: &Path) -> Result<()> {
    let dict = ItemDictionary::bundled();
    let fmt = mimiciv::TIMESTAMP_FORMAT;
    let mut patients = Sink::open(
        out,
        mimiciv::PATIENTS_FILE,
        &["subject_id", "gender", "anchor_age", "anchor_year", "dod"],
    )?;
    let mut admissions = Sink::open(
        out,
        mimiciv::ADMISSIONS_FILE,
        &[
            "subject_id",
            "hadm_id",
            "admittime",
            "dischtime",
            "admission_type",
            "discharge_location",
            "race",
            "hospital_expire_flag",
        ],
    )?;
    let mut icustays = Sink::open(
        out,
        mimiciv::ICUSTAYS_FILE,
        &[
            "subject_id",
            "hadm_id",
            "stay_id",
            "first_careunit",
            "last_careunit",
            "intime",
            "outtime",
            "los",
        ],
    )?;
    let mut chart = Sink::open(
        out,
        mimiciv::CHARTEVENTS_FILE,
        &["subject_id", "hadm_id", "stay_id", "charttime", "itemid", "value", "valuenum"],
    )?;
    let mut labs = Sink::open(
        out,
        mimiciv::LABEVENTS_FILE,
        &["labevent_id", "subject_id", "hadm_id", "itemid", "charttime", "value", "valuenum"],
    )?;
    let mut dx = Sink::open(
        out,
        mimiciv::DIAGNOSES_FILE,
        &["subject_id", "hadm_id", "seq_num", "icd_code", "icd_version"],
    )?;
    let mut seen_subjects = BTreeSet::new();
    let mut lab_id = 0u64;
    for (i, s) in truth.stays.iter().enumerate() {
        let hadm = (20_000_000 + i).to_string();
        let intime = mimic_base() + Duration::days(30 * i as i64);
        let outtime = intime + Duration::minutes(s.duration_minutes);
        let attr = |k: &str| s.attributes.get(k).cloned().unwrap_or_default();
        if seen_subjects.insert(s.subject_id.clone()) {
            patients.row([
                s.subject_id.as_str(),
                &attr("gender"),
                &s.raw_age,
                "2150",
                "",
            ])?;
        }
        admissions.row([
            s.subject_id.as_str(),
            &hadm,
            &(intime - Duration::hours(2)).format(fmt).to_string(),
            &(outtime + Duration::hours(24)).format(fmt).to_string(),
            &attr("admission_type"),
            &s.raw_outcome,
            &attr("race"),
            if s.event == 1 { "1" } else { "0" },
        ])?;
        icustays.row([
            s.subject_id.as_str(),
            &hadm,
            &s.stay_id,
            &attr("first_careunit"),
            &attr("first_careunit"),
            &intime.format(fmt).to_string(),
            &outtime.format(fmt).to_string(),
            &fmt_value(s.duration_minutes as f64 / 1440.0),
        ])?;
        for m in &s.measurements {
            let (itemid, source) = dict.lookup_name(&m.feature).expect("validated feature");
            let ts = (intime + Duration::minutes(m.offset_minutes))
                .format(fmt)
                .to_string();
            let v = fmt_value(m.value);
            let itemid = itemid.to_string();
            if source == "labevents" {
                lab_id += 1;
                labs.row([&lab_id.to_string(), &s.subject_id, &hadm, &itemid, &ts, &v, &v])?;
            } else {
                chart.row([&s.subject_id, &hadm, &s.stay_id, &ts, &itemid, &v, &v])?;
            }
        }
        for (seq, code) in s.icd_codes.iter().enumerate() {
            let (version, raw) = if code.starts_with('I') { ("10", code) } else { ("9", code) };
            dx.row([&s.subject_id, &hadm, &(seq + 1).to_string(), raw, version])?;
        }
    }
    for sink in [patients, admissions, icustays, chart, labs, dx] {
        sink.finish()?;
    }
    Ok(())
}

/// Rows of a wide vital-sign file for one stay: measurements sharing a
/// minute share a row; repeated features at one minute spill to extra rows.
fn wide_rows(stay: &StayTruth, columns: &[String]) -> Vec<(i64, Vec<String>)> {
    let mut by_minute: BTreeMap<i64, Vec<Vec<f64>>> = BTreeMap::new();
    for m in &stay.measurements {
        if let Some(c) = columns.iter().position(|n| *n == m.feature) {
            by_minute
                .entry(m.offset_minutes)
                .or_insert_with(|| vec![vec![]; columns.len()])[c]
                .push(m.value);
        }
    }
    let mut rows = vec![];
    for (minute, cols) in by_minute {
        let depth = cols.iter().map(Vec::len).max().unwrap_or(0);
        for r in 0..depth {
            rows.push((
                minute,
                cols.iter()
                    .map(|v| v.get(r).map(|x| fmt_value(*x)).unwrap_or_default())
                    .collect(),
            ));
        }
    }
    rows
}

fn write_eicu(truth: &GroundTruth, out: &Path) -> Result<()> {
    let mut patient = Sink::open(
        out,
        eicu::PATIENT_FILE,
        &[
            "patientunitstayid",
            "patienthealthsystemstayid",
            "uniquepid",
            "gender",
            "age",
            "ethnicity",
            "unittype",
            "hospitaladmitoffset",
            "unitdischargeoffset",
            "unitdischargestatus",
            "hospitaldischargestatus",
        ],
    )?;
    let names: Vec<&str> = truth.features.iter().map(|f| f.name.as_str()).collect();
    let periodic: Vec<String> = names
        .iter()
        .filter(|n| EICU_PERIODIC.contains(n))
        .map(|n| n.to_string())
        .collect();
    let aperiodic: Vec<String> = names
        .iter()
        .filter(|n| EICU_APERIODIC.contains(n))
        .map(|n| n.to_string())
        .collect();
    let header = |id: &str, cols: &[String]| {
        let mut h = vec![id.to_string(), "patientunitstayid".into(), "observationoffset".into()];
        h.extend(cols.iter().cloned());
        h
    };
    let ph = header("vitalperiodicid", &periodic);
    let ah = header("vitalaperiodicid", &aperiodic);
    let mut vp = Sink::open(out, eicu::PERIODIC_FILE, &ph.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut va = Sink::open(out, eicu::APERIODIC_FILE, &ah.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut lab = Sink::open(
        out,
        eicu::LAB_FILE,
        &["labid", "patientunitstayid", "labresultoffset", "labname", "labresult"],
    )?;
    let mut dx = Sink::open(
        out,
        eicu::DIAGNOSIS_FILE,
        &["diagnosisid", "patientunitstayid", "diagnosisoffset", "diagnosisstring", "icd9code"],
    )?;
    let (mut vp_id, mut va_id, mut lab_id, mut dx_id) = (0u64, 0u64, 0u64, 0u64);
    for s in &truth.stays {
        let attr = |k: &str| s.attributes.get(k).cloned().unwrap_or_default();
        patient.row([
            s.stay_id.as_str(),
            &s.subject_id,
            &format!("002-{}", s.subject_id),
            &attr("gender"),
            &s.raw_age,
            &attr("ethnicity"),
            &attr("unittype"),
            "-120",
            &s.duration_minutes.to_string(),
            &s.raw_outcome,
            &s.raw_outcome,
        ])?;
        for (minute, values) in wide_rows(s, &periodic) {
            vp_id += 1;
            let mut row = vec![vp_id.to_string(), s.stay_id.clone(), minute.to_string()];
            row.extend(values);
            vp.row(&row)?;
        }
        for (minute, values) in wide_rows(s, &aperiodic) {
            va_id += 1;
            let mut row = vec![va_id.to_string(), s.stay_id.clone(), minute.to_string()];
            row.extend(values);
            va.row(&row)?;
        }
        for m in &s.measurements {
            if periodic.contains(&m.feature) || aperiodic.contains(&m.feature) {
                continue;
            }
            lab_id += 1;
            lab.row([
                lab_id.to_string(),
                s.stay_id.clone(),
                m.offset_minutes.to_string(),
                m.feature.clone(),
                fmt_value(m.value),
            ])?;
        }
        for code in &s.icd_codes {
            dx_id += 1;
            dx.row([
                dx_id.to_string().as_str(),
                &s.stay_id,
                "30",
                "synthetic|diagnosis",
                code,
            ])?;
        }
    }
    for sink in [patient, vp, va, lab, dx] {
        sink.finish()?;
    }
    Ok(())
}

fn write_mcmed(truth: &GroundTruth, out: &Path) -> Result<()> {
    let mut visits = Sink::open(
        out,
        mcmed::VISITS_FILE,
        &["CSN", "MRN", "Age", "Gender", "Race", "Triage_acuity", "ED_LOS", "ED_dispo"],
    )?;
    let mut numerics = Sink::open(out, mcmed::NUMERICS_FILE, &["CSN", "Measure", "Value", "Offset"])?;
    let mut labs = Sink::open(
        out,
        mcmed::LABS_FILE,
        &["CSN", "Component_name", "Component_value", "Offset"],
    )?;
    let mut pmh = Sink::open(out, mcmed::PMH_FILE, &["CSN", "Code"])?;
    for s in &truth.stays {
        let attr = |k: &str| s.attributes.get(k).cloned().unwrap_or_default();
        visits.row([
            s.stay_id.as_str(),
            &s.subject_id,
            &s.raw_age,
            &attr("gender"),
            &attr("race"),
            &attr("triage_acuity"),
            &fmt_value(s.duration_hours),
            &s.raw_outcome,
        ])?;
        for m in &s.measurements {
            let row = [
                s.stay_id.clone(),
                m.feature.clone(),
                fmt_value(m.value),
                m.offset_minutes.to_string(),
            ];
            if MCMED_NUMERICS.contains(&m.feature.as_str()) {
                numerics.row(&row)?;
            } else {
                labs.row(&row)?;
            }
        }
        for code in &s.icd_codes {
            pmh.row([s.stay_id.as_str(), code])?;
        }
    }
    for sink in [visits, numerics, labs, pmh] {
        sink.finish()?;
    }
    Ok(())
}

/// Writes an `N x dim` float32 matrix with one row per generated stay (stay
/// file order) and its stay-id sidecar.
pub fn emit_radiology_embeddings(spec: &SyntheticSpec, dim: usize, out_path: &Path) -> Result<FileDigest> {
    if dim == 0 {
        return Err(spec_invalid("radiology embedding dimension must be positive"));
    }
    spec.validate()?;
    let stays = skeleton(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let values: Vec<f32> = (0..stays.len() * dim).map(|_| normal.sample(&mut rng)).collect();
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let digest = write_npy(out_path, &[stays.len(), dim], &values)?;
    let sidecar = radiology_sidecar(out_path);
    let mut ids = String::new();
    for s in &stays {
        ids.push_str(&s.stay_id);
        ids.push('\n');
    }
    fs::write(&sidecar, ids).map_err(|e| Error::io(&sidecar, e))?;
    Ok(digest)
}

/// Writes a minimal eICU tree whose `vitalPeriodic.csv` holds `rows` rows
/// spread over `n_stays` stays with `n_features` periodic columns. Used to
/// exercise chunked ingestion at scale.
pub fn generate_periodic_stress(
    out_dir: &Path,
    n_stays: usize,
    rows: usize,
    n_features: usize,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patient = Sink::open(
        out_dir,
        eicu::PATIENT_FILE,
        &[
            "patientunitstayid",
            "patienthealthsystemstayid",
            "gender",
            "age",
            "ethnicity",
            "unittype",
            "unitdischargeoffset",
            "hospitaldischargestatus",
        ],
    )?;
    for i in 0..n_stays {
        patient.row([
            (100_000 + i).to_string(),
            (200_000 + i).to_string(),
            "Female".into(),
            "60".into(),
            "Caucasian".into(),
            "MICU".into(),
            "4000".into(),
            "Alive".into(),
        ])?;
    }
    patient.finish()?;
    let cols: Vec<&str> = EICU_PERIODIC.iter().take(n_features.min(EICU_PERIODIC.len())).copied().collect();
    let mut header = vec!["vitalperiodicid", "patientunitstayid", "observationoffset"];
    header.extend(&cols);
    let mut vp = Sink::open(out_dir, eicu::PERIODIC_FILE, &header)?;
    let mut row = Vec::with_capacity(header.len());
    for r in 0..rows {
        row.clear();
        row.push((r + 1).to_string());
        row.push((100_000 + rng.random_range(0..n_stays)).to_string());
        row.push(rng.random_range(-60..1500i64).to_string());
        for _ in &cols {
            if rng.random::<f64>() < 0.2 {
                row.push(String::new());
            } else {
                row.push(fmt_value(round2(rng.random_range(20.0..180.0))));
            }
        }
        vp.row(&row)?;
    }
    vp.finish()?;
    Sink::open(
        out_dir,
        eicu::APERIODIC_FILE,
        &["vitalaperiodicid", "patientunitstayid", "observationoffset"],
    )?
    .finish()?;
    Sink::open(
        out_dir,
        eicu::LAB_FILE,
        &["labid", "patientunitstayid", "labresultoffset", "labname", "labresult"],
    )?
    .finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::npy::read_npy;

    fn small(dataset: Dataset) -> SyntheticSpec {
        SyntheticSpec::example(dataset, 10, 7)
    }

    fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    out.insert(rel, fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn deterministic_trees() {
        for ds in Dataset::ALL {
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            generate(&small(ds), a.path()).unwrap();
            generate(&small(ds), b.path()).unwrap();
            let ta = tree_bytes(a.path());
            assert!(ta.len() >= 5, "{ds}: {:?}", ta.keys());
            assert_eq!(ta, tree_bytes(b.path()));
        }
    }

    #[test]
    fn fully_missing_feature_has_no_rows() {
        let mut spec = small(Dataset::Eicu);
        spec.features = vec![
            FeatureSpec::new("heartrate", 2.0, 0.0, 80.0, 5.0),
            FeatureSpec::new("glucose", 2.0, 1.0, 100.0, 5.0),
        ];
        let dir = tempfile::tempdir().unwrap();
        let truth = generate(&spec, dir.path()).unwrap();
        assert!(truth
            .stays
            .iter()
            .flat_map(|s| &s.measurements)
            .all(|m| m.feature != "glucose"));
        let lab = fs::read_to_string(dir.path().join(eicu::LAB_FILE)).unwrap();
        assert_eq!(lab.lines().count(), 1);
        assert!(truth.num_measurements() > 0);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate(&small(Dataset::Mcmed), dir.path()).unwrap();
        let loaded = GroundTruth::load(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        assert_eq!(truth, loaded);
    }

    #[test]
    fn spec_invariants() {
        let mut s = small(Dataset::Eicu);
        s.competing_risk_mix = Some(vec![0.1, 0.1, 0.1, 0.1]);
        assert!(matches!(s.validate(), Err(Error::SpecInvalid(_))));
        let mut s = small(Dataset::Mcmed);
        s.competing_risk_mix = None;
        assert!(s.validate().is_err());
        let mut s = small(Dataset::Mcmed);
        s.competing_risk_mix = Some(vec![0.5, 0.3, 0.2, 0.1]);
        assert!(s.validate().is_err());
        let mut s = small(Dataset::Eicu);
        s.features[0].missing_prob = 1.5;
        assert!(s.validate().is_err());
        let mut s = small(Dataset::Mimiciv);
        s.features.push(FeatureSpec::new("not_an_item", 1.0, 0.0, 0.0, 1.0));
        assert!(s.validate().is_err());
    }

    #[test]
    fn yaml_spec() {
        let text = "dataset_name: mcmed\nn_patients: 5\nstays_per_patient: {min: 1, max: 2}\n\
                    event_rate: 0.0\nmean_duration_hours: 6\nseed: 3\n\
                    competing_risk_mix: [0.3, 0.2, 0.1, 0.05]\n\
                    features:\n  - {name: HR, sampling_rate_per_hour: 1, missing_prob: 0.1, mean: 80, sd: 10}\n";
        let spec = parse_spec(text).unwrap();
        assert_eq!(spec.n_patients, 5);
        assert!(parse_spec(&format!("{text}bogus: 1\n")).is_err());
    }

    #[test]
    fn radiology_shape_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small(Dataset::Eicu);
        spec.n_patients = 5;
        spec.stays_per_patient = StaysPerPatient { min: 1, max: 1 };
        let p = dir.path().join("emb.npy");
        let d1 = emit_radiology_embeddings(&spec, 8, &p).unwrap();
        let arr = read_npy(&p).unwrap();
        assert_eq!(arr.shape, vec![5, 8]);
        let d2 = emit_radiology_embeddings(&spec, 8, &p).unwrap();
        assert_eq!(d1, d2);
        let ids = fs::read_to_string(radiology_sidecar(&p)).unwrap();
        assert_eq!(ids.lines().count(), 5);
        assert!(matches!(
            emit_radiology_embeddings(&spec, 0, &p),
            Err(Error::SpecInvalid(_))
        ));
    }

    #[test]
    fn durations_bounded_by_five_horizons() {
        let truth = plan(&SyntheticSpec::example(Dataset::Mcmed, 300, 1)).unwrap();
        assert!(truth
            .stays
            .iter()
            .all(|s| s.duration_hours <= 5.0 * 24.0 + 1.0 / 60.0));
        assert!(truth.stays.iter().any(|s| s.raw_age == "90+"));
    }
}
