//! The on-disk output tree and its manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::npy::{to_f32, write_npy, FileDigest, NpyElement};
use crate::config::Dataset;
use crate::error::{Error, Result};
use crate::labels::{CifCurves, DiscretizationGrid, KmCurve, SurvivalLabels};
use crate::split::{Split, SplitAssignment, SplitCounts};
use crate::staticfeat::IcdMatrix;
use crate::tensorize::{AssembledTensor, Imputer, ScalerParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURE_NAMES_FILE: &str = "feature_names.json";
pub const MODALITY_INFO_FILE: &str = "modality_info.json";
pub const FIGURES_DIR: &str = "figures_data";
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn x_file(split: Split, ds: Dataset) -> String {
    format!("x_{split}_{ds}.npy")
}
pub fn mask_file(split: Split, ds: Dataset) -> String {
    format!("x_{split}_{ds}_mask.npy")
}
pub fn icd_file(split: Split, ds: Dataset) -> String {
    format!("x_{split}_{ds}_icd.npy")
}
pub fn rad_file(split: Split, ds: Dataset) -> String {
    format!("x_{split}_{ds}_rad.npy")
}
pub fn durations_file(split: Split, ds: Dataset) -> String {
    format!("durations_{split}_{ds}.npy")
}
pub fn events_file(split: Split, ds: Dataset) -> String {
    format!("events_{split}_{ds}.npy")
}
pub fn cuts_file(ds: Dataset) -> String {
    format!("cuts_{ds}.npy")
}
pub fn scaler_file(ds: Dataset) -> String {
    format!("scaler_{ds}.json")
}
pub fn splits_file(ds: Dataset) -> String {
    format!("splits_{ds}.json")
}
pub fn stats_file(ds: Dataset) -> String {
    format!("stats_{ds}.json")
}
pub fn km_file(ds: Dataset) -> String {
    format!("{FIGURES_DIR}/{ds}_km.csv")
}
pub fn cif_file(ds: Dataset) -> String {
    format!("{FIGURES_DIR}/{ds}_cif.csv")
}

/// Final arrays of one split.
#[derive(Debug, Clone)]
pub struct SplitArrays {
    pub split: Split,
    /// Scaled and imputed tensor with its untouched mask.
    pub tensor: AssembledTensor,
    /// Horizon-truncated labels in tensor row order.
    pub labels: SurvivalLabels,
    pub icd: Option<IcdMatrix>,
    /// Row-major `N x dim` embeddings.
    pub radiology: Option<(usize, Vec<f32>)>,
}

/// Everything [`write_outputs`] serialises.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dataset: Dataset,
    pub config_hash: String,
    pub seed: u64,
    pub horizon_hours: f64,
    pub num_risks: u8,
    pub splits: Vec<SplitArrays>,
    pub grid: DiscretizationGrid,
    pub scaler: ScalerParams,
    pub imputer: Imputer,
    pub assignment: SplitAssignment,
    pub modality_info: serde_json::Value,
    pub stats: serde_json::Value,
    pub km: KmCurve,
    pub cif: CifCurves,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dtype: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shape: Option<Vec<usize>>,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub pipeline_version: String,
    pub run_id: String,
    pub dataset: Dataset,
    pub config_hash: String,
    pub seed: u64,
    pub horizon_hours: f64,
    pub num_risks: u8,
    pub windows: usize,
    pub num_features: usize,
    pub scaler_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub item_dictionary_version: Option<String>,
    pub split_counts: BTreeMap<Split, SplitCounts>,
    /// Every emitted file except the manifest itself, sorted by path.
    pub files: Vec<FileEntry>,
}

impl OutputManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct TreeWriter {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl TreeWriter {
    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn npy<T: NpyElement>(&mut self, rel: &str, shape: &[usize], data: &[T]) -> Result<()> {
        let FileDigest { bytes, sha256 } = write_npy(&self.path(rel)?, shape, data)?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            dtype: Some(T::DESCR.to_string()),
            shape: Some(shape.to_vec()),
            bytes,
            sha256,
        });
        Ok(())
    }

    fn bytes(&mut self, rel: &str, data: &[u8]) -> Result<String> {
        let p = self.path(rel)?;
        fs::write(&p, data).map_err(|e| Error::io(&p, e))?;
        let sha256 = sha256_hex(data);
        self.files.push(FileEntry {
            path: rel.to_string(),
            dtype: None,
            shape: None,
            bytes: data.len() as u64,
            sha256: sha256.clone(),
        });
        Ok(sha256)
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<String> {
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        self.bytes(rel, &data)
    }
}

fn shape_error(msg: String) -> Error {
    Error::TensorShape(msg)
}

fn check_shapes(out: &RunOutputs) -> Result<()> {
    let Some(first) = out.splits.first() else {
        return Err(shape_error("no splits to write".into()));
    };
    let names = &first.tensor.feature_names;
    let windows = first.tensor.windows;
    if out.scaler.features != *names {
        return Err(shape_error(format!(
            "scaler covers {} columns, tensor has {}",
            out.scaler.features.len(),
            names.len()
        )));
    }
    for s in &out.splits {
        let t = &s.tensor;
        let [n, w, f] = t.shape();
        if t.feature_names != *names || w != windows {
            return Err(shape_error(format!("{} split has a different feature layout", s.split)));
        }
        if t.values.len() != n * w * f || t.mask.len() != n * w * f {
            return Err(shape_error(format!(
                "{} split: values/mask lengths {}/{} differ from {n}x{w}x{f}",
                s.split,
                t.values.len(),
                t.mask.len()
            )));
        }
        if s.labels.stays != t.stays {
            return Err(shape_error(format!(
                "{} split: {} labels for {n} tensor rows",
                s.split,
                s.labels.len()
            )));
        }
        if let Some(icd) = &s.icd {
            if icd.stays != t.stays || icd.values.len() != n * icd.vocabulary.len() {
                return Err(shape_error(format!("{} split: ICD matrix misaligned", s.split)));
            }
        }
        if let Some((dim, values)) = &s.radiology {
            if values.len() != n * dim {
                return Err(shape_error(format!(
                    "{} split: radiology block has {} values, expected {n}x{dim}",
                    s.split,
                    values.len()
                )));
            }
        }
    }
    Ok(())
}

fn km_csv(km: &KmCurve, n: usize) -> String {
    let mut s = String::from("time,survival,ci_lower,ci_upper,at_risk,events\n");
    let _ = writeln!(s, "0,1,1,1,{n},0");
    for i in 0..km.times.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            km.times[i], km.survival[i], km.ci_lower[i], km.ci_upper[i], km.at_risk[i], km.events[i]
        );
    }
    s
}

fn cif_csv(cif: &CifCurves, n: usize) -> String {
    let k = cif.num_risks();
    let mut s = String::from("time,survival");
    for c in 1..=k {
        let _ = write!(s, ",cif_{c}");
    }
    s.push_str(",at_risk\n");
    s.push_str("0,1");
    for _ in 0..k {
        s.push_str(",0");
    }
    let _ = writeln!(s, ",{n}");
    for i in 0..cif.times.len() {
        let _ = write!(s, "{},{}", cif.times[i], cif.survival[i]);
        for c in 0..k {
            let _ = write!(s, ",{}", cif.cif[c][i]);
        }
        let _ = writeln!(s, ",{}", cif.at_risk[i]);
    }
    s
}

#[derive(Serialize)]
struct FeatureNamesDoc<'a> {
    features: &'a [String],
    num_dynamic: usize,
    num_static: usize,
    one_hot_groups: Vec<[usize; 2]>,
}

#[derive(Serialize)]
struct SplitsDoc<'a> {
    #[serde(flatten)]
    assignment: &'a SplitAssignment,
    /// Stay id of every tensor row, per split.
    rows: BTreeMap<Split, &'a [String]>,
}

#[derive(Serialize)]
struct ScalerDoc<'a> {
    method: &'static str,
    #[serde(flatten)]
    params: &'a ScalerParams,
    imputation: &'a Imputer,
}

fn write_tree(out: &RunOutputs, root: &Path) -> Result<OutputManifest> {
    let ds = out.dataset;
    let mut w = TreeWriter {
        root: root.to_path_buf(),
        files: vec![],
    };
    let first = &out.splits[0].tensor;
    for s in &out.splits {
        let t = &s.tensor;
        let shape = t.shape();
        w.npy(&x_file(s.split, ds), &shape, &to_f32(&t.values)?)?;
        w.npy(&mask_file(s.split, ds), &shape, &t.mask)?;
        let n = s.labels.len();
        w.npy(&durations_file(s.split, ds), &[n], &to_f32(&s.labels.durations)?)?;
        let events: Vec<i64> = s.labels.events.iter().map(|&e| i64::from(e)).collect();
        w.npy(&events_file(s.split, ds), &[n], &events)?;
        if let Some(icd) = &s.icd {
            w.npy(&icd_file(s.split, ds), &[n, icd.vocabulary.len()], &icd.values)?;
        }
        if let Some((dim, values)) = &s.radiology {
            w.npy(&rad_file(s.split, ds), &[n, *dim], values)?;
        }
    }
    w.npy(&cuts_file(ds), &[out.grid.cuts.len()], &out.grid.cuts)?;
    w.json(
        FEATURE_NAMES_FILE,
        &FeatureNamesDoc {
            features: &first.feature_names,
            num_dynamic: first.num_dynamic,
            num_static: first.num_static(),
            one_hot_groups: first.one_hot_groups.iter().map(|g| [g.start, g.end]).collect(),
        },
    )?;
    let scaler_fingerprint = w.json(
        &scaler_file(ds),
        &ScalerDoc {
            method: "zscore",
            params: &out.scaler,
            imputation: &out.imputer,
        },
    )?;
    w.json(MODALITY_INFO_FILE, &out.modality_info)?;
    w.json(
        &splits_file(ds),
        &SplitsDoc {
            assignment: &out.assignment,
            rows: out.splits.iter().map(|s| (s.split, s.tensor.stays.as_slice())).collect(),
        },
    )?;
    w.json(&stats_file(ds), &out.stats)?;
    let n_all: usize = out.splits.iter().map(|s| s.labels.len()).sum();
    w.bytes(&km_file(ds), km_csv(&out.km, n_all).as_bytes())?;
    w.bytes(&cif_file(ds), cif_csv(&out.cif, n_all).as_bytes())?;

    let mut files = w.files;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let mut h = Sha256::new();
    h.update(out.config_hash.as_bytes());
    for f in &files {
        h.update(f.path.as_bytes());
        h.update(f.sha256.as_bytes());
    }
    let run_id = hex::encode(h.finalize())[..16].to_string();
    let manifest = OutputManifest {
        pipeline_version: PIPELINE_VERSION.to_string(),
        run_id,
        dataset: ds,
        config_hash: out.config_hash.clone(),
        seed: out.seed,
        horizon_hours: out.horizon_hours,
        num_risks: out.num_risks,
        windows: first.windows,
        num_features: first.num_features(),
        scaler_fingerprint,
        item_dictionary_version: (ds == Dataset::Mimiciv)
            .then(|| crate::ingest::mimiciv::DICTIONARY_VERSION.to_string()),
        split_counts: out.assignment.counts.clone(),
        files,
    };
    let mut data = serde_json::to_vec_pretty(&manifest)?;
    data.push(b'\n');
    let p = root.join(MANIFEST_FILE);
    fs::write(&p, data).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

fn is_replaceable(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(true);
    }
    if !dir.is_dir() {
        return Ok(false);
    }
    let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    Ok(entries.next().is_none() || dir.join(MANIFEST_FILE).is_file())
}

/// Writes the full output tree into `out_dir`. Files are first written to a
/// sibling temporary directory which replaces `out_dir` only after every
/// write succeeded. An existing `out_dir` must be empty or hold a previous
/// run (a `manifest.json`).
pub fn write_outputs(out: &RunOutputs, out_dir: &Path) -> Result<OutputManifest> {
    check_shapes(out)?;
    if !is_replaceable(out_dir)? {
        return Err(Error::io(
            out_dir,
            io::Error::new(
                io::ErrorKind::AlreadyExists,
                "output directory exists and does not hold a previous run",
            ),
        ));
    }
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".survprep-tmp-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let manifest = write_tree(out, tmp.path())?;

    let old = parent.join(format!(
        ".survprep-old-{}",
        tmp.path()
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    ));
    let had_old = out_dir.exists();
    if had_old {
        fs::rename(out_dir, &old).map_err(|e| Error::io(out_dir, e))?;
    }
    if let Err(e) = fs::rename(tmp.path(), out_dir) {
        if had_old {
            let _ = fs::rename(&old, out_dir);
        }
        return Err(Error::io(out_dir, e));
    }
    if had_old {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    log::info!(
        "stage=write files={} run_id={} dir={}",
        manifest.files.len() + 1,
        manifest.run_id,
        out_dir.display()
    );
    Ok(manifest)
}
