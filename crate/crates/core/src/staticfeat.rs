//! Static demographics (one-hot with rare-category merging), ICD multi-hot
//! vectors and precomputed radiology embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::npy::{read_npy, NpyData};
use crate::error::{Error, Result};
use crate::ingest::CohortTable;

pub const OTHER: &str = "Other";
pub const AGE_COLUMN: &str = "age";
pub const RADIOLOGY_EMBEDDINGS: &str = "radiology_embeddings.npy";

/// Train-fitted vocabulary of one categorical attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVocab {
    pub attribute: String,
    /// Column order: kept categories sorted, then `Other` if anything merged.
    pub categories: Vec<String>,
    /// Training categories folded into `Other`.
    pub merged: Vec<String>,
}

impl CategoricalVocab {
    fn has_other(&self) -> bool {
        self.categories.iter().any(|c| c == OTHER)
    }

    /// Column within the group, or `None` for an all-zero group.
    pub fn column_of(&self, value: &str) -> Option<usize> {
        self.categories
            .iter()
            .position(|c| c == value)
            .or_else(|| {
                if self.has_other() {
                    self.categories.iter().position(|c| c == OTHER)
                } else {
                    None
                }
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticEncoder {
    pub rare_threshold: f64,
    pub categorical: Vec<CategoricalVocab>,
}

impl StaticEncoder {
    /// `age`, then `attribute=category` for every one-hot column.
    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec![AGE_COLUMN.to_string()];
        for v in &self.categorical {
            cols.extend(v.categories.iter().map(|c| format!("{}={c}", v.attribute)));
        }
        cols
    }

    /// Column ranges of the one-hot groups.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let mut start = 1;
        self.categorical
            .iter()
            .map(|v| {
                let r = start..start + v.categories.len();
                start = r.end;
                r
            })
            .collect()
    }
}

/// Categories with train prevalence at least `rare_threshold` keep their own
/// column; the rest share `Other`. A threshold of 0 keeps every category.
pub fn fit_static_encoder(train: &CohortTable, rare_threshold: f64) -> StaticEncoder {
    let n = train.len().max(1) as f64;
    let categorical = train
        .attribute_names
        .iter()
        .map(|attr| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &train.records {
                let v = r.static_attributes.get(attr).map(String::as_str).unwrap_or("");
                if !v.is_empty() {
                    *counts.entry(v).or_default() += 1;
                }
            }
            let (kept, merged): (Vec<_>, Vec<_>) = counts
                .iter()
                .partition(|(_, &c)| c as f64 / n >= rare_threshold);
            let mut categories: Vec<String> = kept.iter().map(|(k, _)| k.to_string()).collect();
            let merged: Vec<String> = merged.iter().map(|(k, _)| k.to_string()).collect();
            if !merged.is_empty() && !categories.iter().any(|c| c == OTHER) {
                categories.push(OTHER.to_string());
            }
            CategoricalVocab {
                attribute: attr.clone(),
                categories,
                merged,
            }
        })
        .collect();
    StaticEncoder {
        rare_threshold,
        categorical,
    }
}

/// `N x F_s` static features, row-major. Unobserved cells hold NaN
/// (continuous) or 0 (one-hot).
#[derive(Debug, Clone, PartialEq)]
pub struct StaticMatrix {
    pub stays: Vec<String>,
    pub columns: Vec<String>,
    pub groups: Vec<Range<usize>>,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl StaticMatrix {
    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.columns.len();
        &self.values[i * f..(i + 1) * f]
    }

    /// True when column `c` belongs to a one-hot group.
    pub fn is_one_hot(&self, c: usize) -> bool {
        self.groups.iter().any(|g| g.contains(&c))
    }
}

pub fn encode_static(cohort: &CohortTable, encoder: &StaticEncoder) -> StaticMatrix {
    let columns = encoder.columns();
    let groups = encoder.groups();
    let f = columns.len();
    let mut values = vec![0.0; cohort.len() * f];
    let mut observed = vec![true; cohort.len() * f];
    for (i, r) in cohort.records.iter().enumerate() {
        let row = i * f;
        if r.age_years.is_finite() {
            values[row] = r.age_years;
        } else {
            values[row] = f64::NAN;
            observed[row] = false;
        }
        for (vocab, g) in encoder.categorical.iter().zip(&groups) {
            let v = r
                .static_attributes
                .get(&vocab.attribute)
                .map(String::as_str)
                .unwrap_or("");
            if v.is_empty() {
                observed[row + g.start..row + g.end].fill(false);
            } else if let Some(c) = vocab.column_of(v) {
                values[row + g.start + c] = 1.0;
            }
        }
    }
    StaticMatrix {
        stays: cohort.stay_ids(),
        columns,
        groups,
        values,
        observed,
    }
}

/// Top `k` codes by number of training stays carrying them, ties broken
/// lexicographically.
pub fn fit_icd_vocabulary(
    train_stays: &[String],
    diagnoses: &HashMap<String, BTreeSet<String>>,
    k: usize,
) -> Vec<String> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in train_stays {
        for code in diagnoses.get(s).into_iter().flatten() {
            *freq.entry(code.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(c, _)| c.to_string()).collect()
}

/// `N x K` multi-hot matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IcdMatrix {
    pub stays: Vec<String>,
    pub vocabulary: Vec<String>,
    pub values: Vec<u8>,
}

pub fn encode_icd(
    stays: &[String],
    diagnoses: &HashMap<String, BTreeSet<String>>,
    vocabulary: &[String],
) -> IcdMatrix {
    let k = vocabulary.len();
    let mut values = vec![0u8; stays.len() * k];
    for (i, s) in stays.iter().enumerate() {
        if let Some(codes) = diagnoses.get(s) {
            for (j, code) in vocabulary.iter().enumerate() {
                if codes.contains(code) {
                    values[i * k + j] = 1;
                }
            }
        }
    }
    IcdMatrix {
        stays: stays.to_vec(),
        vocabulary: vocabulary.to_vec(),
        values,
    }
}

/// Embedding rows with the stay id of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiologyEmbeddings {
    pub stay_ids: Vec<String>,
    pub dim: usize,
    pub values: Vec<f32>,
}

/// Sidecar listing one stay id per embedding row: `<stem>_stay_ids.txt`
/// next to the embeddings file.
pub fn radiology_sidecar(embeddings: &Path) -> PathBuf {
    let stem = embeddings
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    embeddings.with_file_name(format!("{stem}_stay_ids.txt"))
}

pub fn radiology_paths(base_dir: &Path) -> (PathBuf, PathBuf) {
    let emb = base_dir.join(RADIOLOGY_EMBEDDINGS);
    let ids = radiology_sidecar(&emb);
    (emb, ids)
}

/// Loads `radiology_embeddings.npy` (2-D float) from `base_dir` together
/// with its sidecar of stay ids.
pub fn load_radiology(base_dir: &Path) -> Result<RadiologyEmbeddings> {
    let (emb_path, ids_path) = radiology_paths(base_dir);
    if !emb_path.exists() {
        return Err(Error::IngestMissingFile(emb_path));
    }
    if !ids_path.exists() {
        return Err(Error::RadiologyMisaligned(format!(
            "stay-id sidecar {} is missing",
            ids_path.display()
        )));
    }
    let arr = read_npy(&emb_path)?;
    let [rows, dim] = arr.shape[..] else {
        return Err(Error::RadiologyMisaligned(format!(
            "embeddings must be 2-D, got shape {:?}",
            arr.shape
        )));
    };
    let values = match arr.data {
        NpyData::F32(v) => v,
        NpyData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        _ => {
            return Err(Error::NpyFormat(format!(
                "{}: embeddings must be floating point",
                emb_path.display()
            )))
        }
    };
    let text = std::fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
    let stay_ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if stay_ids.len() != rows {
        return Err(Error::RadiologyMisaligned(format!(
            "{rows} embedding rows but {} sidecar ids",
            stay_ids.len()
        )));
    }
    Ok(RadiologyEmbeddings {
        stay_ids,
        dim,
        values,
    })
}

/// Rows for `stays`. The sidecar must list either every stay of the raw stay
/// file in file order, or exactly the filtered cohort in cohort order.
pub fn attach_radiology(
    emb: &RadiologyEmbeddings,
    cohort: &CohortTable,
    stays: &[String],
) -> Result<Vec<f32>> {
    let cohort_ids = cohort.stay_ids();
    if emb.stay_ids != cohort.source_stay_order && emb.stay_ids != cohort_ids {
        let pos = emb
            .stay_ids
            .iter()
            .zip(&cohort.source_stay_order)
            .position(|(a, b)| a != b);
        return Err(Error::RadiologyMisaligned(match pos {
            Some(i) => format!(
                "sidecar row {i} is '{}' but the stay file lists '{}'",
                emb.stay_ids[i], cohort.source_stay_order[i]
            ),
            None => format!(
                "sidecar lists {} ids, the stay file {} and the cohort {}",
                emb.stay_ids.len(),
                cohort.source_stay_order.len(),
                cohort_ids.len()
            ),
        }));
    }
    let row_of: HashMap<&str, usize> = emb
        .stay_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let d = emb.dim;
    let mut out = Vec::with_capacity(stays.len() * d);
    for s in stays {
        let r = *row_of.get(s.as_str()).ok_or_else(|| {
            Error::RadiologyMisaligned(format!("no embedding row for stay '{s}'"))
        })?;
        out.extend_from_slice(&emb.values[r * d..(r + 1) * d]);
    }
    Ok(out)
}
