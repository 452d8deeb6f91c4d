//! MC-MED adapter: `visits.csv`, `numerics.csv`, `labs.csv`, `pmh.csv`.
//! Measurement offsets are minutes from ED arrival; `ED_LOS` is in hours.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use csv::ByteRecord;

use super::csvio::{self, field, Header};
use super::{
    stream_long_minutes, Accumulator, Candidate, CohortBuilder, CohortTable, IngestDiagnostics,
    LongColumns,
};
use crate::config::PipelineConfig;
use crate::error::Result;

pub const VISITS_FILE: &str = "visits.csv";
pub const NUMERICS_FILE: &str = "numerics.csv";
pub const LABS_FILE: &str = "labs.csv";
pub const PMH_FILE: &str = "pmh.csv";

/// (canonical attribute name, raw column name)
const ATTRIBUTES: [(&str, &str); 3] = [
    ("gender", "Gender"),
    ("race", "Race"),
    ("triage_acuity", "Triage_acuity"),
];

pub(super) fn load_cohort(cfg: &PipelineConfig) -> Result<CohortTable> {
    let path = csvio::require_input(&cfg.base_dir, VISITS_FILE)?;
    let mut reader = csvio::open_csv(&path)?;
    let h = Header::read(&mut reader, &path)?;
    let stay_col = h.require("CSN")?;
    let subject_col = h.require("MRN")?;
    let age_col = h.require("Age")?;
    let los_col = h.require("ED_LOS")?;
    let dispo_col = h.require("ED_dispo")?;
    let attr_cols: Vec<(&str, usize)> = ATTRIBUTES
        .iter()
        .map(|(name, col)| h.require(col).map(|c| (*name, c)))
        .collect::<Result<_>>()?;

    let mut builder = CohortBuilder::new(cfg);
    let mut rec = ByteRecord::new();
    while csvio::next_record(&mut reader, &mut rec, &path)? {
        let stay_id = field(&rec, stay_col).to_string();
        builder.note_row(&stay_id);
        builder.offer(Candidate {
            subject_id: field(&rec, subject_col).to_string(),
            stay_id,
            duration_hours: field(&rec, los_col).parse::<f64>().ok(),
            raw_outcome: field(&rec, dispo_col).to_string(),
            age: field(&rec, age_col).to_string(),
            static_attributes: attr_cols
                .iter()
                .map(|(a, c)| (a.to_string(), field(&rec, *c).to_string()))
                .collect::<BTreeMap<_, _>>(),
        });
    }
    let names: Vec<&str> = ATTRIBUTES.iter().map(|(n, _)| *n).collect();
    builder.finish(&names)
}

pub(super) fn stream(
    cfg: &PipelineConfig,
    acc: &mut Accumulator,
    diags: &mut IngestDiagnostics,
) -> Result<()> {
    let numerics = csvio::require_input(&cfg.base_dir, NUMERICS_FILE)?;
    let labs = csvio::require_input(&cfg.base_dir, LABS_FILE)?;
    stream_long_minutes(
        acc,
        &numerics,
        diags,
        LongColumns {
            stay: "CSN",
            offset: "Offset",
            name: "Measure",
            value: "Value",
        },
    )?;
    stream_long_minutes(
        acc,
        &labs,
        diags,
        LongColumns {
            stay: "CSN",
            offset: "Offset",
            name: "Component_name",
            value: "Component_value",
        },
    )
}

pub(super) fn load_diagnoses(
    cfg: &PipelineConfig,
    cohort: &CohortTable,
) -> Result<HashMap<String, BTreeSet<String>>> {
    let path = csvio::require_input(&cfg.base_dir, PMH_FILE)?;
    let mut reader = csvio::open_csv(&path)?;
    let h = Header::read(&mut reader, &path)?;
    let stay_col = h.require("CSN")?;
    let code_col = h.require("Code")?;
    let wanted: BTreeSet<&str> = cohort.records.iter().map(|r| r.stay_id.as_str()).collect();
    let mut out: HashMap<String, BTreeSet<String>> = HashMap::new();
    let mut rec = ByteRecord::new();
    while csvio::next_record(&mut reader, &mut rec, &path)? {
        let stay = field(&rec, stay_col);
        let code = field(&rec, code_col);
        if wanted.contains(stay) && !code.is_empty() {
            out.entry(stay.to_string())
                .or_default()
                .insert(code.to_string());
        }
    }
    Ok(out)
}
