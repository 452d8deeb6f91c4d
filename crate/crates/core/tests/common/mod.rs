#![allow(dead_code)]

use std::path::Path;

use survprep::config::{parse_config, Dataset, PipelineConfig};
use survprep::synthgen::{generate, GroundTruth, SyntheticSpec};

/// Generates a synthetic raw tree under `root/raw` and returns a config that
/// writes to `root/<out>`. `extra` is appended to the YAML verbatim.
pub fn synth_config(
    dataset: Dataset,
    n_patients: usize,
    seed: u64,
    root: &Path,
    out: &str,
    extra: &str,
) -> (GroundTruth, PipelineConfig) {
    let spec = SyntheticSpec::example(dataset, n_patients, seed);
    let raw = root.join("raw");
    let truth = generate(&spec, &raw).expect("synthetic tree");
    let cfg = config_for(dataset, &raw, &root.join(out), extra);
    (truth, cfg)
}

pub fn config_for(dataset: Dataset, raw: &Path, out: &Path, extra: &str) -> PipelineConfig {
    let yaml = format!(
        "dataset_name: {dataset}\nbase_dir: {}\noutput_dir: {}\nseed: 11\n{extra}",
        raw.display(),
        out.display()
    );
    parse_config(&yaml).expect("valid config")
}

use std::collections::{BTreeMap, HashSet};

/// Brute-force window means from the ground truth: for every retained stay,
/// feature and window, the mean over hours of the per-hour mean value.
/// Only offsets in `[0, windows * window_hours)` hours count.
pub fn oracle_windows(
    truth: &GroundTruth,
    stays: &[String],
    windows: u32,
    window_hours: u32,
) -> BTreeMap<(String, u32, String), f64> {
    let keep: HashSet<&str> = stays.iter().map(String::as_str).collect();
    let limit = i64::from(windows * window_hours) * 60;
    let mut hourly: BTreeMap<(String, String, i64), Vec<f64>> = BTreeMap::new();
    for s in &truth.stays {
        if !keep.contains(s.stay_id.as_str()) {
            continue;
        }
        for m in &s.measurements {
            if m.offset_minutes < 0 || m.offset_minutes >= limit {
                continue;
            }
            hourly
                .entry((s.stay_id.clone(), m.feature.clone(), m.offset_minutes / 60))
                .or_default()
                .push(m.value);
        }
    }
    let mut per_window: BTreeMap<(String, u32, String), Vec<f64>> = BTreeMap::new();
    for ((stay, feature, hour), vals) in hourly {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let win = (hour / i64::from(window_hours)) as u32;
        per_window.entry((stay, win, feature)).or_default().push(mean);
    }
    per_window
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            (k, v.into_iter().sum::<f64>() / n)
        })
        .collect()
}

/// Minimal cohort over `(subject, stay)` pairs, in the given order.
pub fn cohort_of(pairs: &[(String, String)]) -> survprep::ingest::CohortTable {
    use survprep::ingest::{CohortRecord, CohortTable, FilterCounts};
    CohortTable {
        dataset: Dataset::Eicu,
        records: pairs
            .iter()
            .map(|(subject, stay)| CohortRecord {
                subject_id: subject.clone(),
                stay_id: stay.clone(),
                duration_hours: 30.0,
                raw_outcome: "Alive".into(),
                age_years: 50.0,
                static_attributes: Default::default(),
            })
            .collect(),
        attribute_names: vec![],
        source_stay_order: pairs.iter().map(|p| p.1.clone()).collect(),
        filter_counts: FilterCounts::default(),
    }
}
