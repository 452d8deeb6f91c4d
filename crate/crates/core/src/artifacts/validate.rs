//! Data-quality checks over a written output tree.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::npy::{read_npy, NpyArray, NpyData};
use super::outputs::{
    durations_file, events_file, icd_file, mask_file, rad_file, scaler_file, sha256_hex,
    x_file, OutputManifest, FEATURE_NAMES_FILE, MANIFEST_FILE,
};
use crate::split::Split;

/// Train columns with fewer observed cells are exempt from the moment check.
pub const MOMENT_MIN_OBSERVED: usize = 30;
pub const MOMENT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

struct Report(Vec<CheckResult>);

impl Report {
    fn push(&mut self, name: &str, passed: bool, details: Value) {
        self.0.push(CheckResult {
            name: name.to_string(),
            passed,
            details,
        });
    }

    fn finish(self) -> ValidationReport {
        ValidationReport {
            passed: !self.0.is_empty() && self.0.iter().all(|c| c.passed),
            checks: self.0,
        }
    }
}

fn as_f64(a: &NpyArray) -> Vec<f64> {
    a.to_f64()
}

fn as_u8(a: &NpyArray) -> Option<&[u8]> {
    match &a.data {
        NpyData::U8(v) => Some(v),
        _ => None,
    }
}

fn walk(dir: &Path, root: &Path, out: &mut BTreeSet<String>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            walk(&p, root, out);
        } else if let Ok(rel) = p.strip_prefix(root) {
            let rel: Vec<String> = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            out.insert(rel.join("/"));
        }
    }
}

/// Loaded per-split arrays; a `None` means the file was absent or unreadable.
struct SplitData {
    split: Split,
    x: Result<NpyArray, String>,
    mask: Result<NpyArray, String>,
    durations: Result<NpyArray, String>,
    events: Result<NpyArray, String>,
}

fn load(dir: &Path, name: &str) -> Result<NpyArray, String> {
    read_npy(&dir.join(name)).map_err(|e| e.to_string())
}

/// Runs every check; failures are report entries, never errors.
pub fn validate_outputs(dir: &Path) -> ValidationReport {
    let mut r = Report(vec![]);
    let manifest = match OutputManifest::load(dir) {
        Ok(m) => {
            r.push("manifest", true, json!({ "run_id": m.run_id }));
            m
        }
        Err(e) => {
            r.push("manifest", false, json!({ "error": e.to_string() }));
            return r.finish();
        }
    };
    let ds = manifest.dataset;

    // Digests, sizes and the exact file set.
    let mut problems = vec![];
    for f in &manifest.files {
        match fs::read(dir.join(&f.path)) {
            Ok(bytes) => {
                if bytes.len() as u64 != f.bytes {
                    problems.push(format!("{}: {} bytes, expected {}", f.path, bytes.len(), f.bytes));
                } else if sha256_hex(&bytes) != f.sha256 {
                    problems.push(format!("{}: digest mismatch", f.path));
                }
            }
            Err(e) => problems.push(format!("{}: {e}", f.path)),
        }
    }
    let mut on_disk = BTreeSet::new();
    walk(dir, dir, &mut on_disk);
    on_disk.remove(MANIFEST_FILE);
    let listed: BTreeSet<String> = manifest.files.iter().map(|f| f.path.clone()).collect();
    if listed.len() != manifest.files.len() {
        problems.push("manifest lists a file more than once".into());
    }
    for extra in on_disk.difference(&listed) {
        problems.push(format!("{extra}: not listed in the manifest"));
    }
    r.push(
        "digests",
        problems.is_empty(),
        json!({ "files": manifest.files.len(), "problems": problems }),
    );

    let splits: Vec<SplitData> = Split::ALL
        .iter()
        .map(|&s| SplitData {
            split: s,
            x: load(dir, &x_file(s, ds)),
            mask: load(dir, &mask_file(s, ds)),
            durations: load(dir, &durations_file(s, ds)),
            events: load(dir, &events_file(s, ds)),
        })
        .collect();

    // (a) shapes
    let mut problems = vec![];
    let mut shapes = serde_json::Map::new();
    let mut wf: Option<(usize, usize)> = None;
    for s in &splits {
        let (x, mask) = match (&s.x, &s.mask) {
            (Ok(x), Ok(m)) => (x, m),
            (Err(e), _) | (_, Err(e)) => {
                problems.push(format!("{}: {e}", s.split));
                continue;
            }
        };
        shapes.insert(s.split.to_string(), json!(x.shape));
        if x.shape.len() != 3 {
            problems.push(format!("{}: tensor is {}-dimensional", s.split, x.shape.len()));
            continue;
        }
        if x.shape != mask.shape {
            problems.push(format!("{}: tensor {:?} vs mask {:?}", s.split, x.shape, mask.shape));
        }
        let n = x.shape[0];
        match wf {
            None => wf = Some((x.shape[1], x.shape[2])),
            Some(prev) if prev != (x.shape[1], x.shape[2]) => {
                problems.push(format!("{}: (W, F) {:?} differs from {:?}", s.split, (x.shape[1], x.shape[2]), prev));
            }
            _ => {}
        }
        for (label, arr) in [("durations", &s.durations), ("events", &s.events)] {
            match arr {
                Ok(a) if a.shape != [n] => {
                    problems.push(format!("{}: {label} shape {:?}, expected [{n}]", s.split, a.shape))
                }
                Err(e) => problems.push(format!("{}: {e}", s.split)),
                _ => {}
            }
        }
        for name in [icd_file(s.split, ds), rad_file(s.split, ds)] {
            if manifest.file(&name).is_some() {
                match load(dir, &name) {
                    Ok(a) if a.shape.len() != 2 || a.shape[0] != n => {
                        problems.push(format!("{name}: shape {:?} for {n} rows", a.shape))
                    }
                    Err(e) => problems.push(e),
                    _ => {}
                }
            }
        }
    }
    if let Some((w, f)) = wf {
        if (w, f) != (manifest.windows, manifest.num_features) {
            problems.push(format!(
                "manifest declares (W, F) = ({}, {}), files hold ({w}, {f})",
                manifest.windows, manifest.num_features
            ));
        }
    }
    r.push("shapes", problems.is_empty(), json!({ "shapes": shapes, "problems": problems }));

    // (b) mask values
    let mut problems = vec![];
    for s in &splits {
        match &s.mask {
            Ok(m) => match as_u8(m) {
                Some(v) => {
                    let bad = v.iter().filter(|&&b| b > 1).count();
                    if bad > 0 {
                        problems.push(format!("{}: {bad} mask entries outside {{0, 1}}", s.split));
                    }
                }
                None => problems.push(format!("{}: mask dtype {} is not |u1", s.split, m.descr())),
            },
            Err(e) => problems.push(format!("{}: {e}", s.split)),
        }
    }
    r.push("mask_binary", problems.is_empty(), json!({ "problems": problems }));

    // (c) event codes
    let k = i64::from(manifest.num_risks);
    let mut problems = vec![];
    for s in &splits {
        match &s.events {
            Ok(a) => match &a.data {
                NpyData::I64(v) => {
                    let bad: Vec<i64> = v.iter().copied().filter(|&e| e < 0 || e > k).take(5).collect();
                    if !bad.is_empty() {
                        problems.push(format!("{}: codes {bad:?} outside 0..={k}", s.split));
                    }
                }
                _ => problems.push(format!("{}: events dtype {} is not <i8", s.split, a.descr())),
            },
            Err(e) => problems.push(format!("{}: {e}", s.split)),
        }
    }
    r.push("event_codes", problems.is_empty(), json!({ "num_risks": k, "problems": problems }));

    // (d) durations
    let h = manifest.horizon_hours;
    let mut problems = vec![];
    for s in &splits {
        match &s.durations {
            Ok(a) => {
                let v = as_f64(a);
                let bad = v.iter().filter(|&&d| !(d >= 0.0 && d <= h)).count();
                if bad > 0 {
                    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    problems.push(format!("{}: {bad} durations outside [0, {h}] (max {max})", s.split));
                }
            }
            Err(e) => problems.push(format!("{}: {e}", s.split)),
        }
    }
    r.push("duration_range", problems.is_empty(), json!({ "horizon_hours": h, "problems": problems }));

    // (e) train moments
    r.0.push(train_moments(dir, &manifest, &splits[0]));

    // (f) missingness per split with deltas against train
    let mut rates = serde_json::Map::new();
    let mut train_rates: Option<Vec<f64>> = None;
    let mut deltas = serde_json::Map::new();
    let mut ok = true;
    for s in &splits {
        let Ok(m) = &s.mask else {
            ok = false;
            continue;
        };
        let Some(v) = as_u8(m) else {
            ok = false;
            continue;
        };
        let f = m.shape.last().copied().unwrap_or(0);
        let rows = if f == 0 { 0 } else { v.len() / f };
        let rate: Vec<f64> = (0..f)
            .map(|c| {
                if rows == 0 {
                    1.0
                } else {
                    let obs = (0..rows).filter(|r| v[r * f + c] == 1).count();
                    1.0 - obs as f64 / rows as f64
                }
            })
            .collect();
        if s.split == Split::Train {
            train_rates = Some(rate.clone());
        } else if let Some(t) = &train_rates {
            let d: Vec<f64> = rate.iter().zip(t).map(|(a, b)| a - b).collect();
            deltas.insert(format!("{}_minus_train", s.split), json!(d));
        }
        rates.insert(s.split.to_string(), json!(rate));
    }
    r.push("missingness", ok, json!({ "rates": rates, "deltas": deltas }));

    // (g) feature names
    let names = fs::read(dir.join(FEATURE_NAMES_FILE))
        .map_err(|e| e.to_string())
        .and_then(|b| serde_json::from_slice::<Value>(&b).map_err(|e| e.to_string()));
    match names {
        Ok(v) => {
            let len = v["features"].as_array().map(|a| a.len());
            let f = wf.map(|x| x.1);
            r.push(
                "feature_names",
                len.is_some() && len == f,
                json!({ "names": len, "tensor_features": f }),
            );
        }
        Err(e) => r.push("feature_names", false, json!({ "error": e })),
    }
    r.finish()
}

fn train_moments(dir: &Path, manifest: &OutputManifest, train: &SplitData) -> CheckResult {
    let fail = |msg: String| CheckResult {
        name: "train_moments".into(),
        passed: false,
        details: json!({ "error": msg }),
    };
    let (x, m) = match (&train.x, &train.mask) {
        (Ok(x), Ok(m)) => (x, m),
        (Err(e), _) | (_, Err(e)) => return fail(e.clone()),
    };
    let Some(mask) = as_u8(m) else {
        return fail("mask is not |u1".into());
    };
    let scaler: Value = match fs::read(dir.join(scaler_file(manifest.dataset)))
        .map_err(|e| e.to_string())
        .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
    {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let degenerate: Vec<bool> = scaler["degenerate"]
        .as_array()
        .map(|a| a.iter().map(|b| b.as_bool().unwrap_or(false)).collect())
        .unwrap_or_default();
    let values = as_f64(x);
    let f = x.shape.last().copied().unwrap_or(0);
    if f == 0 || values.len() != mask.len() {
        return fail("tensor and mask disagree".into());
    }
    let rows = values.len() / f;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut bad = vec![];
    for c in 0..f {
        if degenerate.get(c).copied().unwrap_or(false) {
            continue;
        }
        let obs: Vec<f64> = (0..rows)
            .filter(|r| mask[r * f + c] == 1)
            .map(|r| values[r * f + c])
            .collect();
        if obs.len() < MOMENT_MIN_OBSERVED {
            continue;
        }
        checked += 1;
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let std = (obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let dev = mean.abs().max((std - 1.0).abs());
        worst = worst.max(dev);
        if dev > MOMENT_TOLERANCE {
            bad.push(json!({ "column": c, "mean": mean, "std": std }));
        }
    }
    CheckResult {
        name: "train_moments".into(),
        passed: bad.is_empty(),
        details: json!({
            "columns_checked": checked,
            "max_deviation": worst,
            "tolerance": MOMENT_TOLERANCE,
            "violations": bad,
        }),
    }
}
