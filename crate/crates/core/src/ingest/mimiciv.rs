//! MIMIC-IV adapter.
//!
//! Links `icu/icustays.csv` to `hosp/admissions.csv` (by `hadm_id`) and
//! `hosp/patients.csv` (by `subject_id`). Chart and lab events carry absolute
//! timestamps; offsets are taken relative to the stay's `intime`. Lab events
//! only carry `hadm_id` and are attributed to every cohort stay of that
//! admission.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::NaiveDateTime;
use csv::ByteRecord;

use super::csvio::{self, field, Header};
use super::{parse_value, Accumulator, Candidate, CohortBuilder, CohortTable, IngestDiagnostics};
use crate::config::PipelineConfig;
use crate::error::Result;

pub const ICUSTAYS_FILE: &str = "icu/icustays.csv";
pub const PATIENTS_FILE: &str = "hosp/patients.csv";
pub const ADMISSIONS_FILE: &str = "hosp/admissions.csv";
pub const CHARTEVENTS_FILE: &str = "icu/chartevents.csv";
pub const LABEVENTS_FILE: &str = "hosp/labevents.csv";
pub const DIAGNOSES_FILE: &str = "hosp/diagnoses_icd.csv";

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

const ATTRIBUTES: [&str; 4] = ["admission_type", "first_careunit", "gender", "race"];

/// Version tag of the bundled item dictionary. Bump when the data file changes.
pub const DICTIONARY_VERSION: &str = "1";
const BUNDLED_ITEMS: &str = include_str!("../../data/mimiciv_items.csv");

/// Maps MIMIC-IV `itemid`s to canonical feature names.
#[derive(Debug, Clone)]
pub struct ItemDictionary {
    by_id: HashMap<u32, (String, String)>,
}

impl ItemDictionary {
    pub fn bundled() -> Self {
        let mut by_id = HashMap::new();
        for line in BUNDLED_ITEMS.lines().skip(1) {
            let mut parts = line.split(',');
            let (Some(id), Some(name), Some(source)) = (parts.next(), parts.next(), parts.next())
            else {
                continue;
            };
            if let Ok(id) = id.trim().parse::<u32>() {
                by_id.insert(id, (name.trim().to_string(), source.trim().to_string()));
            }
        }
        ItemDictionary { by_id }
    }

    pub fn feature(&self, itemid: u32) -> Option<&str> {
        self.by_id.get(&itemid).map(|(n, _)| n.as_str())
    }

    /// `(itemid, source table)` for a canonical feature name.
    pub fn lookup_name(&self, feature: &str) -> Option<(u32, &str)> {
        let mut hits: Vec<_> = self
            .by_id
            .iter()
            .filter(|(_, (n, _))| n == feature)
            .map(|(id, (_, s))| (*id, s.as_str()))
            .collect();
        hits.sort_unstable();
        hits.into_iter().next()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

fn parse_ts(raw: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(raw, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S"))
        .ok()
}

fn hours_between(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    (to - from).num_seconds() as f64 / 3600.0
}

pub(super) fn load_cohort(cfg: &PipelineConfig) -> Result<CohortTable> {
    let icustays = csvio::require_input(&cfg.base_dir, ICUSTAYS_FILE)?;
    let patients_path = csvio::require_input(&cfg.base_dir, PATIENTS_FILE)?;
    let admissions_path = csvio::require_input(&cfg.base_dir, ADMISSIONS_FILE)?;
    let mut rec = ByteRecord::new();

    // subject_id -> (gender, anchor_age)
    let mut patients: HashMap<String, (String, String)> = HashMap::new();
    {
        let mut reader = csvio::open_csv(&patients_path)?;
        let h = Header::read(&mut reader, &patients_path)?;
        let subj = h.require("subject_id")?;
        let gender = h.require("gender")?;
        let age = h.require("anchor_age")?;
        while csvio::next_record(&mut reader, &mut rec, &patients_path)? {
            patients.insert(
                field(&rec, subj).to_string(),
                (field(&rec, gender).to_string(), field(&rec, age).to_string()),
            );
        }
    }

    // hadm_id -> (admission_type, discharge_location, race)
    let mut admissions: HashMap<String, (String, String, String)> = HashMap::new();
    {
        let mut reader = csvio::open_csv(&admissions_path)?;
        let h = Header::read(&mut reader, &admissions_path)?;
        let hadm = h.require("hadm_id")?;
        let adm_type = h.require("admission_type")?;
        let dloc = h.require("discharge_location")?;
        let race = h.require("race")?;
        while csvio::next_record(&mut reader, &mut rec, &admissions_path)? {
            admissions.insert(
                field(&rec, hadm).to_string(),
                (
                    field(&rec, adm_type).to_string(),
                    field(&rec, dloc).to_string(),
                    field(&rec, race).to_string(),
                ),
            );
        }
    }

    let mut reader = csvio::open_csv(&icustays)?;
    let h = Header::read(&mut reader, &icustays)?;
    let subj_col = h.require("subject_id")?;
    let hadm_col = h.require("hadm_id")?;
    let stay_col = h.require("stay_id")?;
    let unit_col = h.require("first_careunit")?;
    let in_col = h.require("intime")?;
    let out_col = h.require("outtime")?;

    let mut builder = CohortBuilder::new(cfg);
    while csvio::next_record(&mut reader, &mut rec, &icustays)? {
        let stay_id = field(&rec, stay_col).to_string();
        builder.note_row(&stay_id);
        let subject_id = field(&rec, subj_col).to_string();
        let (Some((gender, age)), Some((adm_type, dloc, race))) = (
            patients.get(&subject_id),
            admissions.get(field(&rec, hadm_col)),
        ) else {
            builder.unlinked();
            continue;
        };
        let duration_hours = match (parse_ts(field(&rec, in_col)), parse_ts(field(&rec, out_col))) {
            (Some(a), Some(b)) => Some(hours_between(a, b)),
            _ => None,
        };
        let static_attributes: BTreeMap<String, String> = [
            ("admission_type", adm_type.clone()),
            ("first_careunit", field(&rec, unit_col).to_string()),
            ("gender", gender.clone()),
            ("race", race.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        builder.offer(Candidate {
            subject_id,
            stay_id,
            duration_hours,
            raw_outcome: dloc.clone(),
            age: age.clone(),
            static_attributes,
        });
    }
    builder.finish(&ATTRIBUTES)
}

/// Per cohort stay (by cohort index): admission time, plus admission -> stays.
struct StayAnchors {
    intime: Vec<Option<NaiveDateTime>>,
    by_hadm: HashMap<String, Vec<u32>>,
}

fn stay_anchors(cfg: &PipelineConfig, cohort_index: &HashMap<String, u32>) -> Result<StayAnchors> {
    let path = csvio::require_input(&cfg.base_dir, ICUSTAYS_FILE)?;
    let mut reader = csvio::open_csv(&path)?;
    let h = Header::read(&mut reader, &path)?;
    let hadm_col = h.require("hadm_id")?;
    let stay_col = h.require("stay_id")?;
    let in_col = h.require("intime")?;
    let mut anchors = StayAnchors {
        intime: vec![None; cohort_index.len()],
        by_hadm: HashMap::new(),
    };
    let mut rec = ByteRecord::new();
    while csvio::next_record(&mut reader, &mut rec, &path)? {
        if let Some(&idx) = cohort_index.get(field(&rec, stay_col)) {
            if anchors.intime[idx as usize].is_some() {
                continue;
            }
            anchors.intime[idx as usize] = parse_ts(field(&rec, in_col));
            anchors
                .by_hadm
                .entry(field(&rec, hadm_col).to_string())
                .or_default()
                .push(idx);
        }
    }
    Ok(anchors)
}

fn cohort_index(cohort: &CohortTable) -> HashMap<String, u32> {
    cohort
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.stay_id.clone(), i as u32))
        .collect()
}

pub(super) fn stream(
    cfg: &PipelineConfig,
    acc: &mut Accumulator,
    diags: &mut IngestDiagnostics,
) -> Result<()> {
    let chart = csvio::require_input(&cfg.base_dir, CHARTEVENTS_FILE)?;
    let lab = csvio::require_input(&cfg.base_dir, LABEVENTS_FILE)?;
    let dict = ItemDictionary::bundled();

    let index: HashMap<String, u32> = acc
        .stays()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    let anchors = stay_anchors(cfg, &index)?;
    let mut item_features: HashMap<u32, Option<u32>> = HashMap::new();

    let mut resolve_item =
        |acc: &mut Accumulator, raw: &str, diag: &mut super::FileDiagnostics| -> Option<u32> {
            let Ok(itemid) = raw.parse::<u32>() else {
                diag.unknown_items += 1;
                return None;
            };
            let f = *item_features
                .entry(itemid)
                .or_insert_with(|| dict.feature(itemid).map(|name| acc.intern_feature(name)));
            if f.is_none() {
                diag.unknown_items += 1;
            }
            f
        };

    {
        let mut reader = csvio::open_csv(&chart)?;
        let h = Header::read(&mut reader, &chart)?;
        drop(reader);
        let stay_col = h.require("stay_id")?;
        let time_col = h.require("charttime")?;
        let item_col = h.require("itemid")?;
        let value_col = h.require("valuenum")?;
        acc.stream_file(&chart, diags, |acc, rec, diag| {
            let Some(stay) = acc.stay_index(field(rec, stay_col)) else {
                diag.out_of_cohort += 1;
                return;
            };
            let Some(feature) = resolve_item(acc, field(rec, item_col), diag) else {
                return;
            };
            let (Some(t), Some(intime), Ok(value)) = (
                parse_ts(field(rec, time_col)),
                anchors.intime[stay as usize],
                parse_value(field(rec, value_col)),
            ) else {
                diag.unparseable_values += 1;
                return;
            };
            if let Some(v) = value {
                acc.push(stay, feature, hours_between(intime, t), v, diag);
            }
        })?;
    }

    let mut reader = csvio::open_csv(&lab)?;
    let h = Header::read(&mut reader, &lab)?;
    drop(reader);
    let hadm_col = h.require("hadm_id")?;
    let time_col = h.require("charttime")?;
    let item_col = h.require("itemid")?;
    let value_col = h.require("valuenum")?;
    acc.stream_file(&lab, diags, |acc, rec, diag| {
        let Some(stays) = anchors.by_hadm.get(field(rec, hadm_col)) else {
            diag.out_of_cohort += 1;
            return;
        };
        let Some(feature) = resolve_item(acc, field(rec, item_col), diag) else {
            return;
        };
        let (Some(t), Ok(value)) = (
            parse_ts(field(rec, time_col)),
            parse_value(field(rec, value_col)),
        ) else {
            diag.unparseable_values += 1;
            return;
        };
        let Some(v) = value else {
            return;
        };
        for &stay in stays {
            if let Some(intime) = anchors.intime[stay as usize] {
                acc.push(stay, feature, hours_between(intime, t), v, diag);
            }
        }
    })
}

pub(super) fn load_diagnoses(
    cfg: &PipelineConfig,
    cohort: &CohortTable,
) -> Result<HashMap<String, BTreeSet<String>>> {
    let path = csvio::require_input(&cfg.base_dir, DIAGNOSES_FILE)?;
    let index = cohort_index(cohort);
    let anchors = stay_anchors(cfg, &index)?;
    let mut reader = csvio::open_csv(&path)?;
    let h = Header::read(&mut reader, &path)?;
    let hadm_col = h.require("hadm_id")?;
    let code_col = h.require("icd_code")?;
    let version_col = h.find("icd_version");
    let mut out: HashMap<String, BTreeSet<String>> = HashMap::new();
    let mut rec = ByteRecord::new();
    while csvio::next_record(&mut reader, &mut rec, &path)? {
        let Some(stays) = anchors.by_hadm.get(field(&rec, hadm_col)) else {
            continue;
        };
        let code = field(&rec, code_col);
        if code.is_empty() {
            continue;
        }
        let token = match version_col.map(|c| field(&rec, c)) {
            Some(v) if !v.is_empty() => format!("ICD{v}:{code}"),
            _ => code.to_string(),
        };
        for &s in stays {
            out.entry(cohort.records[s as usize].stay_id.clone())
                .or_default()
                .insert(token.clone());
        }
    }
    Ok(out)
}
