//! End-to-end run: cohort, split, labels, static, timeseries, integrate,
//! mask, scale, impute, write and validate, in that order.

use std::collections::BTreeMap;
use std::time::Instant;

use serde_json::{json, Value};

use crate::artifacts::{validate_outputs, write_outputs, OutputManifest, RunOutputs, SplitArrays, ValidationReport};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::ingest::{self, CohortTable, StreamOptions, DEFAULT_CHUNK_ROWS};
use crate::labels::{
    apply_grid, cumulative_incidence, extract_labels, fit_grid, kaplan_meier, label_statistics,
    truncate_horizon, SurvivalLabels,
};
use crate::split::{split_patients, Split};
use crate::staticfeat::{
    attach_radiology, encode_icd, encode_static, fit_icd_vocabulary, fit_static_encoder,
    load_radiology, IcdMatrix, StaticMatrix,
};
use crate::tensorize::{apply_scaler, assemble, fit_imputer, fit_scaler, impute, AssembledTensor};
use crate::timeseries::{apply_feature_filter, feature_universe, fit_feature_filter, windowise_with, WindowedDynamic};

/// Number of dynamic features whose window trajectories go into the stats.
pub const TRAJECTORY_FEATURES: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub chunk_rows: usize,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            chunk_rows: DEFAULT_CHUNK_ROWS,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: OutputManifest,
    pub report: ValidationReport,
    /// Wall time per stage in milliseconds, in execution order.
    pub stage_ms: Vec<(&'static str, u128)>,
}

/// Error annotated with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

struct Timer(Vec<(&'static str, u128)>);

impl Timer {
    fn run<T>(
        &mut self,
        stage: &'static str,
        f: impl FnOnce() -> Result<T>,
        rows: impl Fn(&T) -> usize,
    ) -> Result<T, StageError> {
        let start = Instant::now();
        let out = f().map_err(|source| StageError { stage, source })?;
        let ms = start.elapsed().as_millis();
        log::info!("stage={stage} wall_ms={ms} rows={}", rows(&out));
        self.0.push((stage, ms));
        Ok(out)
    }
}

type PerSplit<T> = BTreeMap<Split, T>;

pub fn run_pipeline(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunSummary, StageError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| StageError {
            stage: "setup",
            source: Error::ConfigInvalid(format!("cannot start worker pool: {e}")),
        })?;
    pool.install(|| run_stages(cfg, opts))
}

fn run_stages(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunSummary, StageError> {
    let ds = cfg.dataset_name;
    let windows = cfg.num_windows as usize;
    let mut t = Timer(vec![]);

    let cohort = t.run("cohort", || ingest::load_cohort(cfg), CohortTable::len)?;
    log::info!(
        "cohort dataset={ds} stays={} patients={} rows_read={}",
        cohort.len(),
        cohort.unique_subjects(),
        cohort.filter_counts.rows_read
    );

    let assignment = t.run(
        "split",
        || split_patients(&cohort, &cfg.split_ratios, cfg.seed),
        |a| a.stays.len(),
    )?;
    let stays: PerSplit<Vec<String>> = Split::ALL
        .iter()
        .map(|&s| (s, assignment.stays_in(&cohort, s)))
        .collect();

    let (raw_labels, labels, grid, bins) = t.run(
        "labels",
        || {
            let raw = extract_labels(&cohort, ds)?;
            let truncated = truncate_horizon(&raw, cfg.horizon());
            let per: PerSplit<SurvivalLabels> =
                stays.iter().map(|(&s, ids)| (s, truncated.subset(ids))).collect();
            let grid = fit_grid(
                &per[&Split::Train],
                cfg.n_time_bins,
                cfg.discretisation_method,
                cfg.horizon(),
            )?;
            let bins: PerSplit<Vec<u32>> = per
                .iter()
                .map(|(&s, l)| Ok((s, apply_grid(l, &grid)?)))
                .collect::<Result<_>>()?;
            Ok((raw, per, grid, bins))
        },
        |x| x.0.len(),
    )?;
    let all_labels = truncate_horizon(&raw_labels, cfg.horizon());

    let train_cohort = cohort.subset(&stays[&Split::Train]);
    type StaticOut = (
        Option<(Value, PerSplit<StaticMatrix>)>,
        Option<(Vec<String>, PerSplit<IcdMatrix>)>,
        Option<(usize, PerSplit<Vec<f32>>)>,
    );
    let (stat, icd, rad): StaticOut = t.run(
        "static",
        || {
            let stat = if cfg.modalities.static_features {
                let enc = fit_static_encoder(&train_cohort, cfg.rare_category_threshold);
                let mats = stays
                    .iter()
                    .map(|(&s, ids)| (s, encode_static(&cohort.subset(ids), &enc)))
                    .collect();
                Some((json!({ "encoder": enc, "columns": enc.columns() }), mats))
            } else {
                None
            };
            let icd = if cfg.modalities.icd {
                let dx = ingest::load_diagnoses(cfg, &cohort)?;
                let vocab = fit_icd_vocabulary(&stays[&Split::Train], &dx, cfg.icd_top_k as usize);
                let mats = stays
                    .iter()
                    .map(|(&s, ids)| (s, encode_icd(ids, &dx, &vocab)))
                    .collect();
                Some((vocab, mats))
            } else {
                None
            };
            let rad = if cfg.modalities.radiology {
                let emb = load_radiology(&cfg.base_dir)?;
                let blocks = stays
                    .iter()
                    .map(|(&s, ids)| Ok((s, attach_radiology(&emb, &cohort, ids)?)))
                    .collect::<Result<_>>()?;
                Some((emb.dim, blocks))
            } else {
                None
            };
            Ok((stat, icd, rad))
        },
        |_| cohort.len(),
    )?;

    type DynOut = Option<(PerSplit<WindowedDynamic>, Vec<String>, Value)>;
    let dynamic: DynOut = t.run(
        "timeseries",
        || {
            if !cfg.modalities.timeseries {
                return Ok(None);
            }
            let (hourly, diags) = ingest::stream_hourly(
                cfg,
                &cohort,
                StreamOptions {
                    chunk_rows: opts.chunk_rows,
                    workers: opts.workers,
                },
            )?;
            let universe = feature_universe(&hourly);
            let full: PerSplit<WindowedDynamic> = stays
                .iter()
                .map(|(&s, ids)| {
                    (s, windowise_with(&hourly, ids, &universe, cfg.num_windows, cfg.window_size_hours))
                })
                .collect();
            let train = &full[&Split::Train];
            let retained = fit_feature_filter(train, cfg.missingness_threshold)?;
            let train_missing = train.missing_fractions();
            let excluded: Vec<Value> = universe
                .iter()
                .zip(&train_missing)
                .filter(|(n, _)| !retained.contains(n))
                .map(|(n, m)| json!({ "feature": n, "train_missing_fraction": m }))
                .collect();
            let filtered: PerSplit<WindowedDynamic> = full
                .iter()
                .map(|(&s, w)| Ok((s, apply_feature_filter(w, &retained)?)))
                .collect::<Result<_>>()?;
            let info = json!({
                "ingest": diags,
                "hourly_cells": hourly.len(),
                "universe": universe,
                "retained": retained,
                "excluded": excluded,
                "missingness_threshold": cfg.missingness_threshold,
            });
            Ok(Some((filtered, retained, info)))
        },
        |d| d.as_ref().map_or(0, |x| x.0.values().map(|w| w.num_stays()).sum()),
    )?;

    let mut tensors: PerSplit<AssembledTensor> = t.run(
        "integrate",
        || {
            Split::ALL
                .iter()
                .map(|&s| {
                    let d = dynamic.as_ref().map(|x| &x.0[&s]);
                    let st = stat.as_ref().map(|x| &x.1[&s]);
                    Ok((s, assemble(d, st, windows)?))
                })
                .collect::<Result<_>>()
        },
        |m: &PerSplit<AssembledTensor>| m.values().map(|x| x.num_stays()).sum(),
    )?;

    let missingness = t.run(
        "mask",
        || Ok(missingness_summary(&tensors)),
        |_| tensors.values().map(|x| x.mask.len()).sum(),
    )?;

    let scaler = t.run(
        "scale",
        || {
            let params = fit_scaler(&tensors[&Split::Train]);
            for tensor in tensors.values_mut() {
                apply_scaler(tensor, &params)?;
            }
            Ok(params)
        },
        |p| p.features.len(),
    )?;
    let trajectories = trajectories(&tensors[&Split::Train]);

    let cells: usize = tensors.values().map(|x| x.values.len()).sum();
    let imputer = t.run(
        "impute",
        || {
            let imp = fit_imputer(&tensors[&Split::Train], &scaler, cfg.dynamic_imputation);
            for tensor in tensors.values_mut() {
                impute(tensor, &imp)?;
            }
            Ok(imp)
        },
        |_| cells,
    )?;

    let num_dynamic = tensors[&Split::Train].num_dynamic;
    let feature_names = tensors[&Split::Train].feature_names.clone();
    let modality_info = json!({
        "dataset": ds,
        "modalities": cfg.modalities,
        "num_risks": cfg.num_risks(),
        "horizon_hours": cfg.horizon(),
        "windows": windows,
        "window_size_hours": cfg.window_size_hours,
        "num_features": feature_names.len(),
        "dynamic": {
            "features": dynamic.as_ref().map(|d| d.1.clone()).unwrap_or_default(),
            "num": num_dynamic,
        },
        "static": stat.as_ref().map(|s| s.0.clone()),
        "icd": icd.as_ref().map(|(v, _)| json!({ "top_k": cfg.icd_top_k, "vocabulary": v })),
        "radiology": rad.as_ref().map(|(d, _)| json!({ "dim": d })),
    });

    let label_stats: BTreeMap<String, Value> = std::iter::once(("all".to_string(), json!(label_statistics(&all_labels))))
        .chain(labels.iter().map(|(s, l)| (s.to_string(), json!(label_statistics(l)))))
        .collect();
    let bin_counts: BTreeMap<String, Vec<usize>> = bins
        .iter()
        .map(|(s, b)| {
            let mut counts = vec![0usize; grid.num_bins()];
            for &x in b {
                counts[x as usize - 1] += 1;
            }
            (s.to_string(), counts)
        })
        .collect();
    let truncated_events = raw_labels
        .events
        .iter()
        .zip(&all_labels.events)
        .filter(|(a, b)| a != b)
        .count();
    let stats = json!({
        "dataset": ds,
        "config_hash": cfg.fingerprint(),
        "cohort": {
            "stays": cohort.len(),
            "patients": cohort.unique_subjects(),
            "filter_counts": cohort.filter_counts,
        },
        "splits": assignment.counts,
        "labels": {
            "horizon_hours": cfg.horizon(),
            "events_censored_by_horizon": truncated_events,
            "statistics": label_stats,
            "grid": grid,
            "bin_counts": bin_counts,
        },
        "timeseries": dynamic.as_ref().map(|d| d.2.clone()),
        "missingness": missingness,
        "trajectories": trajectories,
    });

    let outputs = RunOutputs {
        dataset: ds,
        config_hash: cfg.fingerprint(),
        seed: cfg.seed,
        horizon_hours: cfg.horizon(),
        num_risks: cfg.num_risks(),
        splits: Split::ALL
            .iter()
            .map(|&s| SplitArrays {
                split: s,
                tensor: tensors.remove(&s).expect("all splits assembled"),
                labels: labels[&s].clone(),
                icd: icd.as_ref().map(|x| x.1[&s].clone()),
                radiology: rad.as_ref().map(|(d, b)| (*d, b[&s].clone())),
            })
            .collect(),
        km: kaplan_meier(&all_labels),
        cif: cumulative_incidence(&all_labels),
        grid,
        scaler,
        imputer,
        assignment,
        modality_info,
        stats,
    };
    let manifest = t.run("write", || write_outputs(&outputs, &cfg.output_dir), |m| m.files.len())?;
    let report = t.run("validate", || Ok(validate_outputs(&cfg.output_dir)), |r| r.checks.len())?;
    if !report.passed {
        log::warn!("validation failed: {:?}", report.failed());
    }
    Ok(RunSummary {
        manifest,
        report,
        stage_ms: t.0,
    })
}

/// Per-split missing fraction of every final column, with deltas against
/// train.
fn missingness_summary(tensors: &PerSplit<AssembledTensor>) -> Value {
    let rates: PerSplit<Vec<f64>> = tensors
        .iter()
        .map(|(&s, t)| {
            let f = t.num_features();
            let rows = t.num_stays() * t.windows;
            let r = (0..f)
                .map(|c| {
                    if rows == 0 {
                        return 1.0;
                    }
                    let obs = (0..rows).filter(|r| t.mask[r * f + c] == 1).count();
                    1.0 - obs as f64 / rows as f64
                })
                .collect();
            (s, r)
        })
        .collect();
    let train = &rates[&Split::Train];
    let names = &tensors[&Split::Train].feature_names;
    let per_feature: Vec<Value> = names
        .iter()
        .enumerate()
        .map(|(c, n)| {
            json!({
                "feature": n,
                "train": train[c],
                "val": rates[&Split::Val][c],
                "test": rates[&Split::Test][c],
                "delta_val": rates[&Split::Val][c] - train[c],
                "delta_test": rates[&Split::Test][c] - train[c],
            })
        })
        .collect();
    json!({ "features": per_feature })
}

/// Mean and population SD per window over observed scaled train cells, for
/// the first few dynamic features that have any observation.
fn trajectories(train: &AssembledTensor) -> Vec<Value> {
    let f = train.num_features();
    let w = train.windows;
    let mut out = vec![];
    for c in 0..train.num_dynamic {
        if out.len() == TRAJECTORY_FEATURES {
            break;
        }
        let mut mean = vec![];
        let mut sd = vec![];
        let mut count = vec![];
        for win in 0..w {
            let obs: Vec<f64> = (0..train.num_stays())
                .map(|i| (i * w + win) * f + c)
                .filter(|&k| train.mask[k] == 1)
                .map(|k| train.values[k])
                .collect();
            let n = obs.len();
            count.push(n);
            if n == 0 {
                mean.push(None);
                sd.push(None);
                continue;
            }
            let m = obs.iter().sum::<f64>() / n as f64;
            let v = obs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            mean.push(Some(m));
            sd.push(Some(v.sqrt()));
        }
        if count.iter().all(|&n| n == 0) {
            continue;
        }
        out.push(json!({
            "feature": train.feature_names[c],
            "mean": mean,
            "sd": sd,
            "observed": count,
        }));
    }
    out
}
