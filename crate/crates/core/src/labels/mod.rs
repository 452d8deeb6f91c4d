//! Survival labels: extraction from cohort outcomes, horizon truncation,
//! discrete time grids, summary statistics and nonparametric estimators.

mod estimators;
mod grid;
mod stats;

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::config::Dataset;
use crate::error::{Error, Result};
use crate::ingest::CohortTable;

pub use estimators::{cumulative_incidence, kaplan_meier, CifCurves, KmCurve};
pub use grid::{apply_grid, fit_grid, DiscretizationGrid};
pub use stats::{label_statistics, LabelStatistics};

/// Durations in hours and integer event codes (0 = censored, 1..=K = cause).
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalLabels {
    pub stays: Vec<String>,
    pub durations: Vec<f64>,
    pub events: Vec<u8>,
    pub num_risks: u8,
}

impl SurvivalLabels {
    pub fn new(
        stays: Vec<String>,
        durations: Vec<f64>,
        events: Vec<u8>,
        num_risks: u8,
    ) -> Result<Self> {
        if stays.len() != durations.len() || durations.len() != events.len() {
            return Err(Error::TensorShape(format!(
                "label arrays disagree in length: {} stays, {} durations, {} events",
                stays.len(),
                durations.len(),
                events.len()
            )));
        }
        if let Some(&e) = events.iter().find(|&&e| e > num_risks) {
            return Err(Error::TensorShape(format!(
                "event code {e} exceeds the number of risks {num_risks}"
            )));
        }
        Ok(SurvivalLabels {
            stays,
            durations,
            events,
            num_risks,
        })
    }

    /// Unchecked constructor for in-crate callers that uphold the invariants.
    pub(crate) fn from_parts(
        stays: Vec<String>,
        durations: Vec<f64>,
        events: Vec<u8>,
        num_risks: u8,
    ) -> Self {
        debug_assert_eq!(stays.len(), durations.len());
        debug_assert_eq!(durations.len(), events.len());
        SurvivalLabels {
            stays,
            durations,
            events,
            num_risks,
        }
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    /// Rows for the given stays, in the given order. Unknown ids are skipped.
    pub fn subset(&self, stays: &[String]) -> SurvivalLabels {
        let index: HashMap<&str, usize> = self
            .stays
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let rows: Vec<usize> = stays
            .iter()
            .filter_map(|s| index.get(s.as_str()).copied())
            .collect();
        SurvivalLabels {
            stays: rows.iter().map(|&i| self.stays[i].clone()).collect(),
            durations: rows.iter().map(|&i| self.durations[i]).collect(),
            events: rows.iter().map(|&i| self.events[i]).collect(),
            num_risks: self.num_risks,
        }
    }
}

#[derive(Debug, Deserialize)]
struct AliasEntry {
    aliases: HashMap<String, u8>,
    otherwise: Option<u8>,
}

#[derive(Debug, Deserialize)]
struct AliasFile {
    mimiciv: AliasEntry,
    eicu: AliasEntry,
    mcmed: AliasEntry,
}

fn alias_table() -> &'static AliasFile {
    static TABLE: OnceLock<AliasFile> = OnceLock::new();
    TABLE.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/outcome_aliases.json"))
            .expect("bundled outcome alias table is valid JSON")
    })
}

/// Event code for a raw outcome string, matched case-insensitively against
/// the bundled alias table. Empty strings never map.
pub fn outcome_code(dataset: Dataset, raw: &str) -> Option<u8> {
    let key = raw.trim().to_lowercase();
    if key.is_empty() {
        return None;
    }
    let table = alias_table();
    let entry = match dataset {
        Dataset::Mimiciv => &table.mimiciv,
        Dataset::Eicu => &table.eicu,
        Dataset::Mcmed => &table.mcmed,
    };
    entry.aliases.get(&key).copied().or(entry.otherwise)
}

/// Reads `(duration, event)` for every cohort row, in cohort order.
pub fn extract_labels(cohort: &CohortTable, dataset: Dataset) -> Result<SurvivalLabels> {
    let mut stays = Vec::with_capacity(cohort.len());
    let mut durations = Vec::with_capacity(cohort.len());
    let mut events = Vec::with_capacity(cohort.len());
    for r in &cohort.records {
        let code =
            outcome_code(dataset, &r.raw_outcome).ok_or_else(|| Error::LabelUnknownOutcome {
                dataset: dataset.to_string(),
                value: r.raw_outcome.clone(),
            })?;
        stays.push(r.stay_id.clone());
        durations.push(r.duration_hours);
        events.push(code);
    }
    Ok(SurvivalLabels::from_parts(
        stays,
        durations,
        events,
        dataset.num_risks(),
    ))
}

/// Administrative censoring at `horizon`: `T' = min(T, H)`, and the event
/// code is kept only when `T <= H`.
pub fn truncate_horizon(labels: &SurvivalLabels, horizon: f64) -> SurvivalLabels {
    let (durations, events) = labels
        .durations
        .iter()
        .zip(&labels.events)
        .map(|(&t, &e)| if t <= horizon { (t, e) } else { (horizon, 0) })
        .unzip();
    SurvivalLabels {
        stays: labels.stays.clone(),
        durations,
        events,
        num_risks: labels.num_risks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(t: f64, e: u8) -> SurvivalLabels {
        SurvivalLabels::new(vec!["s".into()], vec![t], vec![e], 4).unwrap()
    }

    #[test]
    fn outcome_aliases() {
        assert_eq!(outcome_code(Dataset::Eicu, "Alive"), Some(0));
        assert_eq!(outcome_code(Dataset::Eicu, "Expired"), Some(1));
        assert_eq!(outcome_code(Dataset::Eicu, "EXPIRED"), Some(1));
        assert_eq!(outcome_code(Dataset::Eicu, "Transferred"), None);
        assert_eq!(outcome_code(Dataset::Eicu, ""), None);
        assert_eq!(outcome_code(Dataset::Mimiciv, "DIED"), Some(1));
        assert_eq!(outcome_code(Dataset::Mimiciv, "expired"), Some(1));
        assert_eq!(outcome_code(Dataset::Mimiciv, "HOME"), Some(0));
        assert_eq!(outcome_code(Dataset::Mimiciv, "  "), None);
        assert_eq!(outcome_code(Dataset::Mcmed, "ICU"), Some(3));
        assert_eq!(outcome_code(Dataset::Mcmed, "Home"), Some(1));
        assert_eq!(outcome_code(Dataset::Mcmed, "Ward"), Some(2));
        assert_eq!(outcome_code(Dataset::Mcmed, "Death"), Some(4));
        assert_eq!(outcome_code(Dataset::Mcmed, "LWBS"), Some(0));
        assert_eq!(outcome_code(Dataset::Mcmed, "Observation"), None);
    }

    #[test]
    fn truncation_examples() {
        let h = 240.0;
        let r = truncate_horizon(&one(100.0, 1), h);
        assert_eq!((r.durations[0], r.events[0]), (100.0, 1));
        let r = truncate_horizon(&one(300.0, 1), h);
        assert_eq!((r.durations[0], r.events[0]), (240.0, 0));
        let r = truncate_horizon(&one(240.0, 4), h);
        assert_eq!((r.durations[0], r.events[0]), (240.0, 4));
    }

    #[test]
    fn constructor_checks_lengths_and_codes() {
        assert!(SurvivalLabels::new(vec!["a".into()], vec![1.0, 2.0], vec![0], 1).is_err());
        assert!(SurvivalLabels::new(vec!["a".into()], vec![1.0], vec![2], 1).is_err());
    }

    proptest! {
        #[test]
        fn truncation_is_idempotent(
            rows in proptest::collection::vec((0.0f64..1000.0, 0u8..=4), 1..50),
            h in 1.0f64..500.0,
        ) {
            let n = rows.len();
            let labels = SurvivalLabels::new(
                (0..n).map(|i| i.to_string()).collect(),
                rows.iter().map(|r| r.0).collect(),
                rows.iter().map(|r| r.1).collect(),
                4,
            ).unwrap();
            let once = truncate_horizon(&labels, h);
            let twice = truncate_horizon(&once, h);
            prop_assert_eq!(&once, &twice);
            for (i, (&t, &e)) in labels.durations.iter().zip(&labels.events).enumerate() {
                prop_assert_eq!(once.durations[i], t.min(h));
                prop_assert_eq!(once.events[i], if t <= h { e } else { 0 });
                prop_assert!(once.events[i] == 0 || once.durations[i] <= h);
            }
        }
    }
}
