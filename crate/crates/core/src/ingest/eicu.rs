//! eICU adapter: `patient.csv`, `vitalPeriodic.csv`, `vitalAperiodic.csv`
//! and `lab.csv`. Offsets are integer minutes from unit admission.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use csv::ByteRecord;

use super::csvio::{self, field, Header};
use super::{
    offset_minutes, parse_value, stream_long_minutes, Accumulator, Candidate, CohortBuilder,
    CohortTable, IngestDiagnostics, LongColumns,
};
use crate::config::PipelineConfig;
use crate::error::Result;

pub const PATIENT_FILE: &str = "patient.csv";
pub const PERIODIC_FILE: &str = "vitalPeriodic.csv";
pub const APERIODIC_FILE: &str = "vitalAperiodic.csv";
pub const LAB_FILE: &str = "lab.csv";
pub const DIAGNOSIS_FILE: &str = "diagnosis.csv";

const ATTRIBUTES: [&str; 3] = ["gender", "ethnicity", "unittype"];
const NON_FEATURE_COLUMNS: [&str; 4] = [
    "vitalperiodicid",
    "vitalaperiodicid",
    "patientunitstayid",
    "observationoffset",
];

pub(super) fn load_cohort(cfg: &PipelineConfig) -> Result<CohortTable> {
    let path = csvio::require_input(&cfg.base_dir, PATIENT_FILE)?;
    let mut reader = csvio::open_csv(&path)?;
    let h = Header::read(&mut reader, &path)?;
    let stay_col = h.require("patientunitstayid")?;
    let subject_col = h.require("patienthealthsystemstayid")?;
    let age_col = h.require("age")?;
    let los_col = h.require("unitdischargeoffset")?;
    let status_col = h.require("hospitaldischargestatus")?;
    let attr_cols: Vec<(&str, usize)> = ATTRIBUTES
        .iter()
        .map(|a| h.require(a).map(|c| (*a, c)))
        .collect::<Result<_>>()?;

    let mut builder = CohortBuilder::new(cfg);
    let mut rec = ByteRecord::new();
    while csvio::next_record(&mut reader, &mut rec, &path)? {
        let stay_id = field(&rec, stay_col).to_string();
        builder.note_row(&stay_id);
        let duration_hours = field(&rec, los_col)
            .parse::<f64>()
            .ok()
            .map(|minutes| minutes / 60.0);
        builder.offer(Candidate {
            subject_id: field(&rec, subject_col).to_string(),
            stay_id,
            duration_hours,
            raw_outcome: field(&rec, status_col).to_string(),
            age: field(&rec, age_col).to_string(),
            static_attributes: attr_cols
                .iter()
                .map(|(a, c)| (a.to_string(), field(&rec, *c).to_string()))
                .collect::<BTreeMap<_, _>>(),
        });
    }
    builder.finish(&ATTRIBUTES)
}

pub(super) fn stream(
    cfg: &PipelineConfig,
    acc: &mut Accumulator,
    diags: &mut IngestDiagnostics,
) -> Result<()> {
    let periodic = csvio::require_input(&cfg.base_dir, PERIODIC_FILE)?;
    let aperiodic = csvio::require_input(&cfg.base_dir, APERIODIC_FILE)?;
    let lab = csvio::require_input(&cfg.base_dir, LAB_FILE)?;

    for path in [&periodic, &aperiodic] {
        let mut reader = csvio::open_csv(path)?;
        let h = Header::read(&mut reader, path)?;
        drop(reader);
        let stay_col = h.require("patientunitstayid")?;
        let offset_col = h.require("observationoffset")?;
        let feature_cols: Vec<(usize, u32)> = h
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| !NON_FEATURE_COLUMNS.contains(&n.as_str()))
            .map(|(i, n)| (i, acc.intern_feature(n)))
            .collect();
        acc.stream_file(path, diags, |acc, rec, diag| {
            let Some(stay) = acc.stay_index(field(rec, stay_col)) else {
                diag.out_of_cohort += 1;
                return;
            };
            let Some(minutes) = offset_minutes(field(rec, offset_col)) else {
                diag.unparseable_values += 1;
                return;
            };
            for &(col, feature) in &feature_cols {
                match parse_value(field(rec, col)) {
                    Ok(Some(v)) => acc.push(stay, feature, minutes / 60.0, v, diag),
                    Ok(None) => {}
                    Err(()) => diag.unparseable_values += 1,
                }
            }
        })?;
    }

    stream_long_minutes(
        acc,
        &lab,
        diags,
        LongColumns {
            stay: "patientunitstayid",
            offset: "labresultoffset",
            name: "labname",
            value: "labresult",
        },
    )
}

pub(super) fn load_diagnoses(
    cfg: &PipelineConfig,
    cohort: &CohortTable,
) -> Result<HashMap<String, BTreeSet<String>>> {
    let path = csvio::require_input(&cfg.base_dir, DIAGNOSIS_FILE)?;
    let mut reader = csvio::open_csv(&path)?;
    let h = Header::read(&mut reader, &path)?;
    let stay_col = h.require("patientunitstayid")?;
    let code_col = h.require("icd9code")?;
    let wanted: BTreeSet<&str> = cohort.records.iter().map(|r| r.stay_id.as_str()).collect();
    let mut out: HashMap<String, BTreeSet<String>> = HashMap::new();
    let mut rec = ByteRecord::new();
    while csvio::next_record(&mut reader, &mut rec, &path)? {
        let stay = field(&rec, stay_col);
        if !wanted.contains(stay) {
            continue;
        }
        let codes = out.entry(stay.to_string()).or_default();
        for code in field(&rec, code_col).split(',') {
            let code = code.trim();
            if !code.is_empty() {
                codes.insert(code.to_string());
            }
        }
    }
    Ok(out)
}
