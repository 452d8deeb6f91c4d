//! Raw CSV ingestion.
//!
//! Each dataset adapter produces the same two canonical products: a
//! [`CohortTable`] (one row per stay after cohort filters) and an
//! [`HourlyAggregate`] holding `(sum, count)` per `(stay, hour, feature)`.
//!
//! Measurement files are streamed in chunks of `chunk_rows` CSV rows. A chunk
//! is parsed into a flat buffer, folded into the accumulator and cleared
//! before the next chunk is read, so resident memory is bounded by the chunk
//! buffer plus the number of distinct cells, not by file size.
//!
//! With more than one worker the accumulator is sharded by stay index. Every
//! cell therefore receives its values in file order regardless of the worker
//! count or chunk size, and the resulting sums are bit-identical.

pub mod csvio;
pub mod eicu;
pub mod mcmed;
pub mod mimiciv;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use csv::ByteRecord;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Dataset, PipelineConfig};
use crate::error::{Error, Result};

pub use mimiciv::ItemDictionary;

pub const DEFAULT_CHUNK_ROWS: usize = 500_000;

/// One stay (ICU stay or ED visit) in canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRecord {
    pub subject_id: String,
    pub stay_id: String,
    pub duration_hours: f64,
    pub raw_outcome: String,
    pub age_years: f64,
    /// Categorical attributes; a missing value is stored as an empty string.
    pub static_attributes: BTreeMap<String, String>,
}

/// Row counts removed by each cohort filter, in application order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterCounts {
    pub rows_read: usize,
    pub unlinked: usize,
    pub duplicate_stay: usize,
    pub age: usize,
    pub min_stay: usize,
    pub outcome: usize,
    pub retained: usize,
}

#[derive(Debug, Clone)]
pub struct CohortTable {
    pub dataset: Dataset,
    pub records: Vec<CohortRecord>,
    /// Categorical attribute names emitted by the adapter, in adapter order.
    pub attribute_names: Vec<String>,
    /// Every stay id listed in the raw stay file, before filtering, in file order.
    pub source_stay_order: Vec<String>,
    pub filter_counts: FilterCounts,
}

impl CohortTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stay_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.stay_id.clone()).collect()
    }

    /// Rows whose stay id is in `stays`, in the order given by `stays`.
    pub fn subset(&self, stays: &[String]) -> CohortTable {
        let index: HashMap<&str, &CohortRecord> = self
            .records
            .iter()
            .map(|r| (r.stay_id.as_str(), r))
            .collect();
        let records = stays
            .iter()
            .filter_map(|s| index.get(s.as_str()).map(|r| (*r).clone()))
            .collect();
        CohortTable {
            dataset: self.dataset,
            records,
            attribute_names: self.attribute_names.clone(),
            source_stay_order: self.source_stay_order.clone(),
            filter_counts: self.filter_counts.clone(),
        }
    }

    pub fn unique_subjects(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.subject_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Parses an age field. "greater than 89" style entries map to 90 and
/// numeric ages are capped at 90. Non-numeric values yield `None`.
pub fn parse_age(raw: &str) -> Option<f64> {
    let s = raw.trim().to_ascii_lowercase();
    if s.is_empty() {
        return None;
    }
    if s == "greater than 89" || s == "> 89" || s == ">89" || s == "90+" {
        return Some(90.0);
    }
    let v: f64 = s.parse().ok()?;
    v.is_finite().then_some(v.clamp(0.0, 90.0))
}

/// Applies the age, minimum-stay and outcome-completeness filters in that
/// order to adapter-produced candidate rows.
pub(crate) struct CohortBuilder<'a> {
    cfg: &'a PipelineConfig,
    records: Vec<CohortRecord>,
    seen: BTreeSet<String>,
    source_order: Vec<String>,
    counts: FilterCounts,
}

/// A stay as read from the raw files, before filtering.
pub(crate) struct Candidate {
    pub subject_id: String,
    pub stay_id: String,
    pub duration_hours: Option<f64>,
    pub raw_outcome: String,
    pub age: String,
    pub static_attributes: BTreeMap<String, String>,
}

impl<'a> CohortBuilder<'a> {
    pub fn new(cfg: &'a PipelineConfig) -> Self {
        CohortBuilder {
            cfg,
            records: Vec::new(),
            seen: BTreeSet::new(),
            source_order: Vec::new(),
            counts: FilterCounts::default(),
        }
    }

    pub fn note_row(&mut self, stay_id: &str) {
        self.counts.rows_read += 1;
        self.source_order.push(stay_id.to_string());
    }

    pub fn unlinked(&mut self) {
        self.counts.unlinked += 1;
    }

    pub fn offer(&mut self, c: Candidate) {
        if c.stay_id.is_empty() || c.subject_id.is_empty() {
            self.counts.unlinked += 1;
            return;
        }
        if !self.seen.insert(c.stay_id.clone()) {
            self.counts.duplicate_stay += 1;
            return;
        }
        let age = match parse_age(&c.age) {
            Some(a) if a >= f64::from(self.cfg.min_age_years) => a,
            _ => {
                self.counts.age += 1;
                return;
            }
        };
        let duration = match c.duration_hours {
            Some(d) if d.is_finite() && d >= 0.0 && d >= self.cfg.min_stay_hours => d,
            _ => {
                self.counts.min_stay += 1;
                return;
            }
        };
        if crate::labels::outcome_code(self.cfg.dataset_name, &c.raw_outcome).is_none() {
            self.counts.outcome += 1;
            return;
        }
        self.records.push(CohortRecord {
            subject_id: c.subject_id,
            stay_id: c.stay_id,
            duration_hours: duration,
            raw_outcome: c.raw_outcome,
            age_years: age,
            static_attributes: c.static_attributes,
        });
    }

    pub fn finish(mut self, attribute_names: &[&str]) -> Result<CohortTable> {
        self.counts.retained = self.records.len();
        if self.records.is_empty() {
            return Err(Error::EmptyCohort);
        }
        Ok(CohortTable {
            dataset: self.cfg.dataset_name,
            records: self.records,
            attribute_names: attribute_names.iter().map(|s| s.to_string()).collect(),
            source_stay_order: self.source_order,
            filter_counts: self.counts,
        })
    }
}

/// Loads and filters the cohort for `cfg.dataset_name`.
pub fn load_cohort(cfg: &PipelineConfig) -> Result<CohortTable> {
    match cfg.dataset_name {
        Dataset::Mimiciv => mimiciv::load_cohort(cfg),
        Dataset::Eicu => eicu::load_cohort(cfg),
        Dataset::Mcmed => mcmed::load_cohort(cfg),
    }
}

/// Diagnosis code sets per stay id, for the ICD modality.
pub fn load_diagnoses(
    cfg: &PipelineConfig,
    cohort: &CohortTable,
) -> Result<HashMap<String, BTreeSet<String>>> {
    match cfg.dataset_name {
        Dataset::Mimiciv => mimiciv::load_diagnoses(cfg, cohort),
        Dataset::Eicu => eicu::load_diagnoses(cfg, cohort),
        Dataset::Mcmed => mcmed::load_diagnoses(cfg, cohort),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StreamOptions {
    pub chunk_rows: usize,
    pub workers: usize,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            chunk_rows: DEFAULT_CHUNK_ROWS,
            workers: 1,
        }
    }
}

/// Per-file tallies of what happened to each raw row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FileDiagnostics {
    pub rows_read: u64,
    /// Depends on `chunk_rows`, so it is logged but kept out of serialized output.
    #[serde(skip)]
    pub chunks: u64,
    pub measurements_retained: u64,
    pub out_of_cohort: u64,
    pub out_of_window: u64,
    pub unparseable_values: u64,
    pub unknown_items: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestDiagnostics {
    pub files: BTreeMap<String, FileDiagnostics>,
}

/// Streams every measurement file of the dataset into an [`HourlyAggregate`].
pub fn stream_hourly(
    cfg: &PipelineConfig,
    cohort: &CohortTable,
    opts: StreamOptions,
) -> Result<(HourlyAggregate, IngestDiagnostics)> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut acc = Accumulator::new(cohort.stay_ids(), cfg.max_hours, opts);
    let mut diags = IngestDiagnostics::default();
    match cfg.dataset_name {
        Dataset::Mimiciv => mimiciv::stream(cfg, &mut acc, &mut diags)?,
        Dataset::Eicu => eicu::stream(cfg, &mut acc, &mut diags)?,
        Dataset::Mcmed => mcmed::stream(cfg, &mut acc, &mut diags)?,
    }
    Ok((acc.finish(), diags))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub stay: u32,
    pub hour: u32,
    pub feature: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub sum: f64,
    pub count: u64,
}

impl Cell {
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

/// Map `(stay, hour, feature) -> (sum, count)` over the first `max_hours`
/// hours of each stay. Stay indices follow the cohort order supplied at
/// construction; feature indices follow first appearance.
#[derive(Debug, Clone)]
pub struct HourlyAggregate {
    max_hours: u32,
    stays: Vec<String>,
    stay_index: HashMap<String, u32>,
    features: Vec<String>,
    feature_index: HashMap<String, u32>,
    entries: HashMap<CellKey, Cell>,
}

impl HourlyAggregate {
    pub fn new(stays: Vec<String>, max_hours: u32) -> Self {
        let stay_index = stays
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        HourlyAggregate {
            max_hours,
            stays,
            stay_index,
            features: Vec::new(),
            feature_index: HashMap::new(),
            entries: HashMap::new(),
        }
    }

    pub fn max_hours(&self) -> u32 {
        self.max_hours
    }

    pub fn stays(&self) -> &[String] {
        &self.stays
    }

    pub fn stay_index(&self, stay_id: &str) -> Option<u32> {
        self.stay_index.get(stay_id).copied()
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn intern_feature(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.feature_index.get(name) {
            return i;
        }
        let i = self.features.len() as u32;
        self.features.push(name.to_string());
        self.feature_index.insert(name.to_string(), i);
        i
    }

    /// Folds one raw value into its hourly cell. Values outside the window,
    /// for unknown stays or non-finite are ignored and `false` is returned.
    pub fn add(&mut self, stay_id: &str, offset_hours: f64, feature: &str, value: f64) -> bool {
        let Some(stay) = self.stay_index(stay_id) else {
            return false;
        };
        let Some(hour) = hour_bin(offset_hours, self.max_hours) else {
            return false;
        };
        if !value.is_finite() {
            return false;
        }
        let feature = self.intern_feature(feature);
        fold_one(&mut self.entries, CellKey { stay, hour, feature }, value);
        true
    }

    pub fn get(&self, stay_id: &str, hour: u32, feature: &str) -> Option<Cell> {
        let stay = self.stay_index(stay_id)?;
        let feature = *self.feature_index.get(feature)?;
        self.entries.get(&CellKey { stay, hour, feature }).copied()
    }

    /// Entries sorted by `(stay index, feature index, hour)`.
    pub fn sorted_entries(&self) -> Vec<(CellKey, Cell)> {
        let mut v: Vec<_> = self.entries.iter().map(|(k, c)| (*k, *c)).collect();
        v.sort_unstable_by_key(|(k, _)| (k.stay, k.feature, k.hour));
        v
    }

    /// Order-free view keyed by names, for comparisons between aggregates.
    pub fn canonical(&self) -> BTreeMap<(String, u32, String), (f64, u64)> {
        self.entries
            .iter()
            .map(|(k, c)| {
                (
                    (
                        self.stays[k.stay as usize].clone(),
                        k.hour,
                        self.features[k.feature as usize].clone(),
                    ),
                    (c.sum, c.count),
                )
            })
            .collect()
    }

    /// Entry-wise `(sum, count)` addition of another aggregate over the same
    /// stay list.
    pub fn merge(&mut self, other: &HourlyAggregate) -> Result<()> {
        if other.stays != self.stays || other.max_hours != self.max_hours {
            return Err(Error::TensorShape(
                "cannot merge hourly aggregates built over different cohorts".into(),
            ));
        }
        let mut keys: Vec<_> = other.entries.iter().collect();
        keys.sort_unstable_by_key(|(k, _)| (k.stay, k.feature, k.hour));
        for (k, c) in keys {
            let feature = self.intern_feature(&other.features[k.feature as usize]);
            let e = self
                .entries
                .entry(CellKey { feature, ..*k })
                .or_insert(Cell { sum: 0.0, count: 0 });
            e.sum += c.sum;
            e.count += c.count;
        }
        Ok(())
    }
}

/// `floor(offset)` when `0 <= offset < max_hours`.
pub fn hour_bin(offset_hours: f64, max_hours: u32) -> Option<u32> {
    if offset_hours.is_nan() || offset_hours < 0.0 || offset_hours >= f64::from(max_hours) {
        return None;
    }
    Some(offset_hours.floor() as u32)
}

fn fold_one(map: &mut HashMap<CellKey, Cell>, key: CellKey, value: f64) {
    map.entry(key)
        .and_modify(|c| {
            c.sum += value;
            c.count += 1;
        })
        .or_insert(Cell {
            sum: value,
            count: 1,
        });
}

#[derive(Debug, Clone, Copy)]
struct Measurement {
    key: CellKey,
    value: f64,
}

/// Streaming accumulator shared by the adapters.
pub(crate) struct Accumulator {
    agg: HourlyAggregate,
    shards: Vec<HashMap<CellKey, Cell>>,
    buffer: Vec<Measurement>,
    opts: StreamOptions,
}

impl Accumulator {
    pub fn new(stays: Vec<String>, max_hours: u32, opts: StreamOptions) -> Self {
        let opts = StreamOptions {
            chunk_rows: opts.chunk_rows.max(1),
            workers: opts.workers.max(1),
        };
        Accumulator {
            agg: HourlyAggregate::new(stays, max_hours),
            shards: vec![HashMap::new(); opts.workers],
            buffer: Vec::new(),
            opts,
        }
    }

    pub fn stay_index(&self, stay_id: &str) -> Option<u32> {
        self.agg.stay_index(stay_id)
    }

    pub fn intern_feature(&mut self, name: &str) -> u32 {
        self.agg.intern_feature(name)
    }

    pub fn stays(&self) -> &[String] {
        &self.agg.stays
    }

    /// Buffers one parsed value, applying the window filter.
    pub fn push(
        &mut self,
        stay: u32,
        feature: u32,
        offset_hours: f64,
        value: f64,
        diag: &mut FileDiagnostics,
    ) {
        match hour_bin(offset_hours, self.agg.max_hours) {
            Some(hour) => {
                diag.measurements_retained += 1;
                self.buffer.push(Measurement {
                    key: CellKey {
                        stay,
                        hour,
                        feature,
                    },
                    value,
                });
            }
            None => diag.out_of_window += 1,
        }
    }

    fn flush(&mut self) {
        if self.buffer.is_empty() {
            return;
        }
        let workers = self.shards.len();
        if workers == 1 {
            let shard = &mut self.shards[0];
            for m in self.buffer.drain(..) {
                fold_one(shard, m.key, m.value);
            }
            return;
        }
        let mut parts: Vec<Vec<Measurement>> = vec![Vec::new(); workers];
        for m in self.buffer.drain(..) {
            parts[m.key.stay as usize % workers].push(m);
        }
        self.shards
            .par_iter_mut()
            .zip(parts.par_iter())
            .for_each(|(shard, part)| {
                for m in part {
                    fold_one(shard, m.key, m.value);
                }
            });
    }

    /// Streams one CSV file through `parse`, folding every `chunk_rows` rows.
    pub fn stream_file<F>(
        &mut self,
        path: &Path,
        diags: &mut IngestDiagnostics,
        mut parse: F,
    ) -> Result<()>
    where
        F: FnMut(&mut Accumulator, &ByteRecord, &mut FileDiagnostics),
    {
        let mut reader = csvio::open_csv(path)?;
        let mut record = ByteRecord::new();
        let mut diag = FileDiagnostics::default();
        let mut rows_in_chunk = 0usize;
        while csvio::next_record(&mut reader, &mut record, path)? {
            diag.rows_read += 1;
            parse(self, &record, &mut diag);
            rows_in_chunk += 1;
            if rows_in_chunk == self.opts.chunk_rows {
                self.flush();
                diag.chunks += 1;
                rows_in_chunk = 0;
            }
        }
        if rows_in_chunk > 0 {
            self.flush();
            diag.chunks += 1;
        }
        self.buffer.shrink_to_fit();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        log::debug!("file={name} rows={} chunks={}", diag.rows_read, diag.chunks);
        diags.files.insert(name, diag);
        Ok(())
    }

    pub fn finish(mut self) -> HourlyAggregate {
        self.flush();
        for shard in self.shards.drain(..) {
            self.agg.entries.extend(shard);
        }
        self.agg
    }
}

/// Parses a numeric measurement. Empty fields are "not measured" and yield
/// `Ok(None)`; anything else that is not a finite number is an error.
pub(crate) fn parse_value(raw: &str) -> std::result::Result<Option<f64>, ()> {
    if raw.is_empty() {
        return Ok(None);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(()),
    }
}

pub(crate) fn offset_minutes(raw: &str) -> Option<f64> {
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Column names of a long-format measurement file (one value per row).
pub(crate) struct LongColumns<'a> {
    pub stay: &'a str,
    pub offset: &'a str,
    pub name: &'a str,
    pub value: &'a str,
}

/// Streams a long-format file whose offsets are minutes from admission,
/// pivoting the name column into features.
pub(crate) fn stream_long_minutes(
    acc: &mut Accumulator,
    path: &Path,
    diags: &mut IngestDiagnostics,
    cols: LongColumns<'_>,
) -> Result<()> {
    let mut reader = csvio::open_csv(path)?;
    let h = csvio::Header::read(&mut reader, path)?;
    drop(reader);
    let stay_col = h.require(cols.stay)?;
    let offset_col = h.require(cols.offset)?;
    let name_col = h.require(cols.name)?;
    let value_col = h.require(cols.value)?;
    let mut names: HashMap<String, u32> = HashMap::new();
    acc.stream_file(path, diags, |acc, rec, diag| {
        let Some(stay) = acc.stay_index(csvio::field(rec, stay_col)) else {
            diag.out_of_cohort += 1;
            return;
        };
        let name = csvio::field(rec, name_col);
        if name.is_empty() {
            diag.unknown_items += 1;
            return;
        }
        let (Some(minutes), Ok(value)) = (
            offset_minutes(csvio::field(rec, offset_col)),
            parse_value(csvio::field(rec, value_col)),
        ) else {
            diag.unparseable_values += 1;
            return;
        };
        let Some(value) = value else {
            return;
        };
        let feature = match names.get(name) {
            Some(&f) => f,
            None => {
                let f = acc.intern_feature(name);
                names.insert(name.to_string(), f);
                f
            }
        };
        acc.push(stay, feature, minutes / 60.0, value, diag);
    })
}
