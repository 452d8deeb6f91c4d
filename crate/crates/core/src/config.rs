//! Run configuration.
//!
//! A [`PipelineConfig`] is loaded from a flat YAML document whose keys are the
//! snake_case field names below. Unknown keys are rejected. Absent optional
//! keys take per-dataset defaults:
//!
//! | key                 | mimiciv | eicu | mcmed |
//! |---------------------|---------|------|-------|
//! | `max_hours`         | 24      | 24   | 6     |
//! | `max_horizon_hours` | 240     | 240  | 24    |
//! | `min_stay_hours`    | 24      | 24   | 0.5   |
//! | `modalities.icd`    | true    | false| true  |
//!
//! Every dataset defaults to `num_windows: 6`, `n_time_bins: 10`,
//! `missingness_threshold: 0.01`, `rare_category_threshold: 0.01` and
//! `split_ratios: {train: 0.70, val: 0.15, test: 0.15}`.
//! `window_size_hours` defaults to `max_hours / num_windows`.
//!
//! Setting `rare_category_threshold: 0` disables rare-category merging.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Mimiciv,
    Eicu,
    Mcmed,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::Mimiciv, Dataset::Eicu, Dataset::Mcmed];

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Mimiciv => "mimiciv",
            Dataset::Eicu => "eicu",
            Dataset::Mcmed => "mcmed",
        }
    }

    /// Number of competing event types (1 for single-risk mortality tasks).
    pub fn num_risks(self) -> u8 {
        match self {
            Dataset::Mimiciv | Dataset::Eicu => 1,
            Dataset::Mcmed => 4,
        }
    }

    pub fn default_max_hours(self) -> u32 {
        match self {
            Dataset::Mimiciv | Dataset::Eicu => 24,
            Dataset::Mcmed => 6,
        }
    }

    pub fn default_horizon_hours(self) -> u32 {
        match self {
            Dataset::Mimiciv | Dataset::Eicu => 240,
            Dataset::Mcmed => 24,
        }
    }

    pub fn default_min_stay_hours(self) -> f64 {
        match self {
            Dataset::Mimiciv | Dataset::Eicu => 24.0,
            Dataset::Mcmed => 0.5,
        }
    }

    fn default_icd(self) -> bool {
        !matches!(self, Dataset::Eicu)
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscretisationMethod {
    Quantile,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StaticImputation {
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicImputation {
    Zero,
    ForwardFill,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMethod {
    Zscore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub timeseries: bool,
    #[serde(rename = "static")]
    pub static_features: bool,
    pub icd: bool,
    pub radiology: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Complete, validated description of one preprocessing run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset_name: Dataset,
    pub base_dir: PathBuf,
    pub output_dir: PathBuf,
    pub max_hours: u32,
    pub num_windows: u32,
    pub window_size_hours: u32,
    pub max_horizon_hours: u32,
    pub n_time_bins: u32,
    pub discretisation_method: DiscretisationMethod,
    pub missingness_threshold: f64,
    pub rare_category_threshold: f64,
    pub static_imputation: StaticImputation,
    pub dynamic_imputation: DynamicImputation,
    pub scaling_method: ScalingMethod,
    pub modalities: Modalities,
    pub icd_top_k: u32,
    pub split_ratios: SplitRatios,
    pub seed: u64,
    pub min_stay_hours: f64,
    pub min_age_years: u32,
    /// Names of the fields that were filled from defaults.
    pub defaulted: BTreeSet<&'static str>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModalities {
    timeseries: Option<bool>,
    #[serde(rename = "static")]
    static_features: Option<bool>,
    icd: Option<bool>,
    radiology: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset_name: Option<Dataset>,
    base_dir: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    max_hours: Option<u32>,
    num_windows: Option<u32>,
    window_size_hours: Option<u32>,
    max_horizon_hours: Option<u32>,
    n_time_bins: Option<u32>,
    discretisation_method: Option<DiscretisationMethod>,
    missingness_threshold: Option<f64>,
    rare_category_threshold: Option<f64>,
    static_imputation: Option<StaticImputation>,
    dynamic_imputation: Option<DynamicImputation>,
    scaling_method: Option<ScalingMethod>,
    modalities: Option<RawModalities>,
    icd_top_k: Option<u32>,
    split_ratios: Option<SplitRatios>,
    seed: Option<u64>,
    min_stay_hours: Option<f64>,
    min_age_years: Option<u32>,
}

/// Reads and validates a YAML config file.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Parses a YAML config document. Pure function of the input text.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| Error::ConfigSyntax(e.to_string()))?;
    if !value.is_mapping() {
        return Err(Error::ConfigSyntax(
            "top level of the config must be a mapping".into(),
        ));
    }
    let raw: RawConfig =
        serde_yaml::from_value(value).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    resolve(raw)
}

fn resolve(raw: RawConfig) -> Result<PipelineConfig> {
    let dataset_name = raw.dataset_name.ok_or(Error::ConfigMissing("dataset_name"))?;
    let base_dir = raw.base_dir.ok_or(Error::ConfigMissing("base_dir"))?;
    let output_dir = raw.output_dir.ok_or(Error::ConfigMissing("output_dir"))?;

    let mut defaulted = BTreeSet::new();
    macro_rules! or_default {
        ($field:ident, $default:expr) => {
            match raw.$field {
                Some(v) => v,
                None => {
                    defaulted.insert(stringify!($field));
                    $default
                }
            }
        };
    }

    let max_hours = or_default!(max_hours, dataset_name.default_max_hours());
    let num_windows = or_default!(num_windows, 6);
    if max_hours == 0 {
        return Err(invalid("max_hours must be a positive integer"));
    }
    if num_windows == 0 {
        return Err(invalid("num_windows must be a positive integer"));
    }
    let window_size_hours = match raw.window_size_hours {
        Some(w) => w,
        None => {
            defaulted.insert("window_size_hours");
            if max_hours % num_windows != 0 {
                return Err(invalid(format!(
                    "num_windows ({num_windows}) must divide max_hours ({max_hours}) \
                     when window_size_hours is omitted"
                )));
            }
            max_hours / num_windows
        }
    };
    let max_horizon_hours = or_default!(max_horizon_hours, dataset_name.default_horizon_hours());
    let n_time_bins = or_default!(n_time_bins, 10);
    let discretisation_method =
        or_default!(discretisation_method, DiscretisationMethod::Quantile);
    let missingness_threshold = or_default!(missingness_threshold, 0.01);
    let rare_category_threshold = or_default!(rare_category_threshold, 0.01);
    let static_imputation = or_default!(static_imputation, StaticImputation::Mean);
    let dynamic_imputation = or_default!(dynamic_imputation, DynamicImputation::Zero);
    let scaling_method = or_default!(scaling_method, ScalingMethod::Zscore);
    let modalities = match raw.modalities {
        Some(m) => Modalities {
            timeseries: m.timeseries.unwrap_or(true),
            static_features: m.static_features.unwrap_or(true),
            icd: m.icd.unwrap_or(dataset_name.default_icd()),
            radiology: m.radiology.unwrap_or(false),
        },
        None => {
            defaulted.insert("modalities");
            Modalities {
                timeseries: true,
                static_features: true,
                icd: dataset_name.default_icd(),
                radiology: false,
            }
        }
    };
    let icd_top_k = or_default!(icd_top_k, 500);
    let split_ratios = or_default!(split_ratios, SplitRatios::default());
    let seed = or_default!(seed, 42);
    let min_stay_hours = or_default!(min_stay_hours, dataset_name.default_min_stay_hours());
    let min_age_years = or_default!(min_age_years, 18);

    let cfg = PipelineConfig {
        dataset_name,
        base_dir,
        output_dir,
        max_hours,
        num_windows,
        window_size_hours,
        max_horizon_hours,
        n_time_bins,
        discretisation_method,
        missingness_threshold,
        rare_category_threshold,
        static_imputation,
        dynamic_imputation,
        scaling_method,
        modalities,
        icd_top_k,
        split_ratios,
        seed,
        min_stay_hours,
        min_age_years,
        defaulted,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

impl PipelineConfig {
    /// Checks every cross-field invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.max_hours == 0 {
            return Err(invalid("max_hours must be a positive integer"));
        }
        if self.num_windows == 0 {
            return Err(invalid("num_windows must be a positive integer"));
        }
        if self.window_size_hours == 0 {
            return Err(invalid("window_size_hours must be a positive integer"));
        }
        if u64::from(self.num_windows) * u64::from(self.window_size_hours)
            != u64::from(self.max_hours)
        {
            return Err(invalid(format!(
                "num_windows x window_size_hours ({} x {} = {}) must equal max_hours ({})",
                self.num_windows,
                self.window_size_hours,
                u64::from(self.num_windows) * u64::from(self.window_size_hours),
                self.max_hours
            )));
        }
        if self.max_horizon_hours < self.max_hours {
            return Err(invalid(format!(
                "max_horizon_hours ({}) must be >= max_hours ({})",
                self.max_horizon_hours, self.max_hours
            )));
        }
        if self.n_time_bins < 2 {
            return Err(invalid(format!(
                "n_time_bins must be >= 2, got {}",
                self.n_time_bins
            )));
        }
        if !(0.0..=1.0).contains(&self.missingness_threshold) {
            return Err(invalid(format!(
                "missingness_threshold must lie in [0, 1], got {}",
                self.missingness_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.rare_category_threshold) {
            return Err(invalid(format!(
                "rare_category_threshold must lie in [0, 1], got {}",
                self.rare_category_threshold
            )));
        }
        let r = self.split_ratios;
        for (name, v) in [("train", r.train), ("val", r.val), ("test", r.test)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!(
                    "split_ratios.{name} must be > 0, got {v}"
                )));
            }
        }
        let sum = r.train + r.val + r.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split_ratios must sum to 1.0, got {sum}")));
        }
        if self.icd_top_k == 0 {
            return Err(invalid("icd_top_k must be a positive integer"));
        }
        if !(self.min_stay_hours >= 0.0) || !self.min_stay_hours.is_finite() {
            return Err(invalid(format!(
                "min_stay_hours must be a nonnegative number, got {}",
                self.min_stay_hours
            )));
        }
        if !self.modalities.timeseries && !self.modalities.static_features {
            return Err(invalid(
                "at least one of modalities.timeseries and modalities.static must be enabled",
            ));
        }
        Ok(())
    }

    pub fn num_risks(&self) -> u8 {
        self.dataset_name.num_risks()
    }

    pub fn horizon(&self) -> f64 {
        f64::from(self.max_horizon_hours)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = self.modalities;
        let r = self.split_ratios;
        vec![
            ("dataset_name", self.dataset_name.to_string()),
            ("base_dir", self.base_dir.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("max_hours", self.max_hours.to_string()),
            ("num_windows", self.num_windows.to_string()),
            ("window_size_hours", self.window_size_hours.to_string()),
            ("max_horizon_hours", self.max_horizon_hours.to_string()),
            ("n_time_bins", self.n_time_bins.to_string()),
            (
                "discretisation_method",
                format!("{:?}", self.discretisation_method).to_lowercase(),
            ),
            ("missingness_threshold", self.missingness_threshold.to_string()),
            (
                "rare_category_threshold",
                self.rare_category_threshold.to_string(),
            ),
            ("static_imputation", "mean".to_string()),
            (
                "dynamic_imputation",
                match self.dynamic_imputation {
                    DynamicImputation::Zero => "zero",
                    DynamicImputation::ForwardFill => "forward_fill",
                    DynamicImputation::Median => "median",
                }
                .to_string(),
            ),
            ("scaling_method", "zscore".to_string()),
            (
                "modalities",
                format!(
                    "timeseries={} static={} icd={} radiology={}",
                    m.timeseries, m.static_features, m.icd, m.radiology
                ),
            ),
            ("icd_top_k", self.icd_top_k.to_string()),
            (
                "split_ratios",
                format!("train={} val={} test={}", r.train, r.val, r.test),
            ),
            ("seed", self.seed.to_string()),
            ("min_stay_hours", self.min_stay_hours.to_string()),
            ("min_age_years", self.min_age_years.to_string()),
        ]
    }

    /// Deterministic multi-line dump of every effective parameter.
    /// Fields that came from defaults carry a trailing `(default)` marker.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            let marker = if self.defaulted.contains(key) {
                " (default)"
            } else {
                ""
            };
            let _ = writeln!(out, "{key}: {value}{marker}");
        }
        out
    }

    /// SHA-256 over the effective parameters, excluding output location.
    /// Two configs that produce the same run hash to the same value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (key, value) in self.entries() {
            if key == "output_dir" || key == "base_dir" {
                continue;
            }
            h.update(key.as_bytes());
            h.update(b"=");
            h.update(value.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Free-function form of [`PipelineConfig::describe`].
pub fn describe_config(cfg: &PipelineConfig) -> String {
    cfg.describe()
}
