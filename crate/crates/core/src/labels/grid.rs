use serde::{Deserialize, Serialize};

use super::SurvivalLabels;
use crate::config::DiscretisationMethod;
use crate::error::{Error, Result};

/// Bin boundaries `0 = b_0 < b_1 < ... < b_B = H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationGrid {
    pub cuts: Vec<f64>,
    pub method: DiscretisationMethod,
}

impl DiscretizationGrid {
    pub fn num_bins(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.cuts.last().expect("grid has at least two cuts")
    }

    /// 1-based bin of `t`: bins are `[b_{j-1}, b_j)`, the last one closed at `H`.
    pub fn bin_of(&self, t: f64) -> Result<u32> {
        let h = self.horizon();
        if !(0.0..=h).contains(&t) {
            return Err(Error::GridOutOfRange {
                duration: t,
                horizon: h,
            });
        }
        let interior = &self.cuts[1..self.cuts.len() - 1];
        Ok(1 + interior.partition_point(|&c| c <= t) as u32)
    }
}

/// Linear-interpolation quantile of sorted data: position `p (n - 1)`,
/// interpolating between the neighbouring order statistics.
pub(crate) fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Fits the grid on training labels. Quantile cuts are taken over the
/// durations of training stays with an event.
pub fn fit_grid(
    train: &SurvivalLabels,
    bins: u32,
    method: DiscretisationMethod,
    horizon: f64,
) -> Result<DiscretizationGrid> {
    if bins < 2 {
        return Err(Error::GridDegenerate(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let b = bins as usize;
    let interior: Vec<f64> = match method {
        DiscretisationMethod::Uniform => (1..b)
            .map(|j| j as f64 * horizon / b as f64)
            .collect(),
        DiscretisationMethod::Quantile => {
            let mut times: Vec<f64> = train
                .durations
                .iter()
                .zip(&train.events)
                .filter(|(_, &e)| e > 0)
                .map(|(&t, _)| t)
                .collect();
            times.sort_by(f64::total_cmp);
            let mut distinct = times.clone();
            distinct.dedup();
            if distinct.len() < b {
                return Err(Error::GridDegenerate(format!(
                    "{} distinct training event durations for {b} bins",
                    distinct.len()
                )));
            }
            (1..b)
                .map(|j| quantile_linear(&times, j as f64 / b as f64))
                .collect()
        }
    };
    let mut cuts = vec![0.0];
    for c in interior {
        if c > 0.0 && c < horizon && c > *cuts.last().unwrap() {
            cuts.push(c);
        }
    }
    cuts.push(horizon);
    if cuts.len() < 3 {
        return Err(Error::GridDegenerate(format!(
            "only {} bin(s) survive after collapsing duplicate cuts",
            cuts.len() - 1
        )));
    }
    Ok(DiscretizationGrid { cuts, method })
}

pub fn apply_grid(labels: &SurvivalLabels, grid: &DiscretizationGrid) -> Result<Vec<u32>> {
    labels.durations.iter().map(|&t| grid.bin_of(t)).collect()
}
