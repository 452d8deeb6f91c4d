//! Hourly aggregates to fixed windows, and train-fitted missingness filtering.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::ingest::HourlyAggregate;

/// `N x W x F` window means, row-major. Missing cells hold NaN and have
/// `observed = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDynamic {
    pub stays: Vec<String>,
    pub windows: usize,
    pub window_hours: u32,
    pub features: Vec<String>,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl WindowedDynamic {
    pub fn num_stays(&self) -> usize {
        self.stays.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn index(&self, stay: usize, window: usize, feature: usize) -> usize {
        (stay * self.windows + window) * self.features.len() + feature
    }

    pub fn value(&self, stay: usize, window: usize, feature: usize) -> Option<f64> {
        let i = self.index(stay, window, feature);
        self.observed[i].then(|| self.values[i])
    }

    /// Observed cells per feature.
    pub fn observed_counts(&self) -> Vec<usize> {
        let f = self.features.len();
        let mut counts = vec![0usize; f];
        for (i, &o) in self.observed.iter().enumerate() {
            if o {
                counts[i % f] += 1;
            }
        }
        counts
    }

    /// Fraction of missing cells per feature (1.0 for an empty split).
    pub fn missing_fractions(&self) -> Vec<f64> {
        let cells = (self.stays.len() * self.windows) as f64;
        self.observed_counts()
            .into_iter()
            .map(|c| {
                if cells == 0.0 {
                    1.0
                } else {
                    1.0 - c as f64 / cells
                }
            })
            .collect()
    }
}

/// Sorted names of features with at least one hourly entry.
pub fn feature_universe(hourly: &HourlyAggregate) -> Vec<String> {
    let present: BTreeSet<u32> = hourly
        .sorted_entries()
        .iter()
        .map(|(k, _)| k.feature)
        .collect();
    let mut names: Vec<String> = present
        .into_iter()
        .map(|f| hourly.features()[f as usize].clone())
        .collect();
    names.sort();
    names
}

/// Window `j` covers hours `[j w, (j + 1) w)`; its value is the mean of the
/// hourly means of hours that have data. Rows follow `stays`; columns follow
/// [`feature_universe`] of the whole aggregate.
pub fn windowise(
    hourly: &HourlyAggregate,
    stays: &[String],
    num_windows: u32,
    window_hours: u32,
) -> WindowedDynamic {
    let features = feature_universe(hourly);
    windowise_with(hourly, stays, &features, num_windows, window_hours)
}

/// As [`windowise`] with an explicit column list. Names absent from the
/// aggregate yield fully missing columns.
pub fn windowise_with(
    hourly: &HourlyAggregate,
    stays: &[String],
    features: &[String],
    num_windows: u32,
    window_hours: u32,
) -> WindowedDynamic {
    let w = num_windows as usize;
    let f = features.len();
    let column: HashMap<&str, usize> = features
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let agg_col: Vec<Option<usize>> = hourly
        .features()
        .iter()
        .map(|n| column.get(n.as_str()).copied())
        .collect();
    let mut row_of: HashMap<u32, usize> = HashMap::new();
    for (row, s) in stays.iter().enumerate() {
        if let Some(idx) = hourly.stay_index(s) {
            row_of.insert(idx, row);
        }
    }

    let cells = stays.len() * w * f;
    let mut sums = vec![0.0f64; cells];
    let mut hours = vec![0u32; cells];
    for (key, cell) in hourly.sorted_entries() {
        let (Some(&row), Some(col)) = (row_of.get(&key.stay), agg_col[key.feature as usize])
        else {
            continue;
        };
        let win = (key.hour / window_hours) as usize;
        if win >= w || cell.count == 0 {
            continue;
        }
        let i = (row * w + win) * f + col;
        sums[i] += cell.mean();
        hours[i] += 1;
    }
    let observed: Vec<bool> = hours.iter().map(|&h| h > 0).collect();
    let values = sums
        .iter()
        .zip(&hours)
        .map(|(&s, &h)| if h > 0 { s / f64::from(h) } else { f64::NAN })
        .collect();
    WindowedDynamic {
        stays: stays.to_vec(),
        windows: w,
        window_hours,
        features: features.to_vec(),
        values,
        observed,
    }
}

/// Features whose observed fraction of train cells is at least `threshold`,
/// in the original column order.
pub fn fit_feature_filter(train: &WindowedDynamic, threshold: f64) -> Result<Vec<String>> {
    let cells = (train.num_stays() * train.windows) as f64;
    let retained: Vec<String> = train
        .observed_counts()
        .into_iter()
        .zip(&train.features)
        .filter(|(c, _)| cells > 0.0 && *c as f64 / cells >= threshold)
        .map(|(_, n)| n.clone())
        .collect();
    if retained.is_empty() {
        return Err(Error::FilterEmpty);
    }
    Ok(retained)
}

pub fn apply_feature_filter(data: &WindowedDynamic, retained: &[String]) -> Result<WindowedDynamic> {
    let cols: Vec<usize> = retained
        .iter()
        .map(|name| {
            data.features
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| Error::FilterSchema(format!("unknown feature '{name}'")))
        })
        .collect::<Result<_>>()?;
    let f_new = cols.len();
    let rows = data.num_stays() * data.windows;
    let mut values = Vec::with_capacity(rows * f_new);
    let mut observed = Vec::with_capacity(rows * f_new);
    let f_old = data.num_features();
    for r in 0..rows {
        for &c in &cols {
            values.push(data.values[r * f_old + c]);
            observed.push(data.observed[r * f_old + c]);
        }
    }
    Ok(WindowedDynamic {
        stays: data.stays.clone(),
        windows: data.windows,
        window_hours: data.window_hours,
        features: retained.to_vec(),
        values,
        observed,
    })
}
