//! Final `N x W x F` tensors: masks, train-fitted z-scoring, imputation and
//! broadcasting of static features across windows.

use serde::{Deserialize, Serialize};

use crate::config::DynamicImputation;
use crate::error::{Error, Result};
use crate::staticfeat::StaticMatrix;
use crate::timeseries::WindowedDynamic;

/// Row-major `N x W x F` values and 0/1 mask. Dynamic columns come first,
/// then static columns broadcast across every window.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledTensor {
    pub stays: Vec<String>,
    pub windows: usize,
    pub feature_names: Vec<String>,
    pub num_dynamic: usize,
    pub values: Vec<f64>,
    pub mask: Vec<u8>,
    /// Static one-hot column ranges, in tensor column indices.
    pub one_hot_groups: Vec<std::ops::Range<usize>>,
}

impl AssembledTensor {
    pub fn num_stays(&self) -> usize {
        self.stays.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn num_static(&self) -> usize {
        self.feature_names.len() - self.num_dynamic
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.stays.len(), self.windows, self.feature_names.len()]
    }

    pub fn index(&self, stay: usize, window: usize, feature: usize) -> usize {
        (stay * self.windows + window) * self.feature_names.len() + feature
    }

    pub fn is_one_hot(&self, c: usize) -> bool {
        self.one_hot_groups.iter().any(|g| g.contains(&c))
    }
}

fn check_rows(dynamic: Option<&WindowedDynamic>, stat: Option<&StaticMatrix>) -> Result<()> {
    if let (Some(d), Some(s)) = (dynamic, stat) {
        if d.stays != s.stays {
            return Err(Error::TensorShape(format!(
                "dynamic block has {} stays, static block {} (or the order differs)",
                d.stays.len(),
                s.stays.len()
            )));
        }
    }
    Ok(())
}

/// 1 where a cell was observed, 0 otherwise; static flags are repeated
/// across all windows.
pub fn build_mask(
    dynamic: Option<&WindowedDynamic>,
    stat: Option<&StaticMatrix>,
    windows: usize,
) -> Result<Vec<u8>> {
    Ok(assemble(dynamic, stat, windows)?.mask)
}

/// Concatenates `[dynamic | static]` along the feature axis. Missing cells
/// hold NaN until [`impute`].
pub fn assemble(
    dynamic: Option<&WindowedDynamic>,
    stat: Option<&StaticMatrix>,
    windows: usize,
) -> Result<AssembledTensor> {
    check_rows(dynamic, stat)?;
    if let Some(d) = dynamic {
        if d.windows != windows {
            return Err(Error::TensorShape(format!(
                "dynamic block has {} windows, expected {windows}",
                d.windows
            )));
        }
    }
    let stays = match (dynamic, stat) {
        (Some(d), _) => d.stays.clone(),
        (None, Some(s)) => s.stays.clone(),
        (None, None) => {
            return Err(Error::TensorShape("no feature block to assemble".into()));
        }
    };
    let fd = dynamic.map_or(0, |d| d.num_features());
    let fs = stat.map_or(0, |s| s.num_columns());
    let f = fd + fs;
    let n = stays.len();
    let mut values = vec![f64::NAN; n * windows * f];
    let mut mask = vec![0u8; n * windows * f];
    for i in 0..n {
        for w in 0..windows {
            let base = (i * windows + w) * f;
            if let Some(d) = dynamic {
                let src = (i * windows + w) * fd;
                for c in 0..fd {
                    if d.observed[src + c] {
                        values[base + c] = d.values[src + c];
                        mask[base + c] = 1;
                    }
                }
            }
            if let Some(s) = stat {
                for c in 0..fs {
                    if s.observed[i * fs + c] {
                        values[base + fd + c] = s.values[i * fs + c];
                        mask[base + fd + c] = 1;
                    }
                }
            }
        }
    }
    let mut feature_names: Vec<String> = dynamic.map(|d| d.features.clone()).unwrap_or_default();
    let mut one_hot_groups = vec![];
    if let Some(s) = stat {
        feature_names.extend(s.columns.iter().cloned());
        one_hot_groups = s.groups.iter().map(|g| g.start + fd..g.end + fd).collect();
    }
    Ok(AssembledTensor {
        stays,
        windows,
        feature_names,
        num_dynamic: fd,
        values,
        mask,
        one_hot_groups,
    })
}

/// Per-column moments over observed training cells. `std` is the population
/// standard deviation; columns without observations get `(0, 1)` and
/// constant columns get `std = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub features: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub observed_count: Vec<u64>,
    /// Columns whose std was replaced by 1.
    pub degenerate: Vec<bool>,
}

pub fn fit_scaler(train: &AssembledTensor) -> ScalerParams {
    let f = train.num_features();
    let rows = train.num_stays() * train.windows;
    let mut sum = vec![0.0f64; f];
    let mut count = vec![0u64; f];
    for r in 0..rows {
        for c in 0..f {
            if train.mask[r * f + c] == 1 {
                sum[c] += train.values[r * f + c];
                count[c] += 1;
            }
        }
    }
    let mean: Vec<f64> = (0..f)
        .map(|c| if count[c] > 0 { sum[c] / count[c] as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0f64; f];
    for r in 0..rows {
        for c in 0..f {
            if train.mask[r * f + c] == 1 {
                let d = train.values[r * f + c] - mean[c];
                sq[c] += d * d;
            }
        }
    }
    let mut degenerate = vec![false; f];
    let std = (0..f)
        .map(|c| {
            let s = if count[c] > 0 {
                (sq[c] / count[c] as f64).sqrt()
            } else {
                0.0
            };
            if s > 0.0 && s.is_finite() {
                s
            } else {
                degenerate[c] = true;
                1.0
            }
        })
        .collect();
    ScalerParams {
        features: train.feature_names.clone(),
        mean,
        std,
        observed_count: count,
        degenerate,
    }
}

fn check_params(t: &AssembledTensor, params: &ScalerParams) -> Result<()> {
    if params.mean.len() != t.num_features() || params.std.len() != t.num_features() {
        return Err(Error::TensorShape(format!(
            "scaler has {} columns, tensor {}",
            params.mean.len(),
            t.num_features()
        )));
    }
    Ok(())
}

/// `(x - mean) / std` on observed cells; missing cells are left as they are.
pub fn apply_scaler(t: &mut AssembledTensor, params: &ScalerParams) -> Result<()> {
    check_params(t, params)?;
    let f = t.num_features();
    for (i, v) in t.values.iter_mut().enumerate() {
        if t.mask[i] == 1 {
            let c = i % f;
            *v = (*v - params.mean[c]) / params.std[c];
        }
    }
    Ok(())
}

/// Inverse of [`apply_scaler`] on observed cells.
pub fn unscale(t: &mut AssembledTensor, params: &ScalerParams) -> Result<()> {
    check_params(t, params)?;
    let f = t.num_features();
    for (i, v) in t.values.iter_mut().enumerate() {
        if t.mask[i] == 1 {
            let c = i % f;
            *v = *v * params.std[c] + params.mean[c];
        }
    }
    Ok(())
}

/// Train-fitted fill values in scaled units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub dynamic: DynamicImputation,
    /// Fill for each column when it is not forward-filled: 0, the scaled
    /// train median, or for one-hot columns the scaled value of raw 0.
    pub fill: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

/// Fits fill values on the scaled training tensor. Static continuous columns
/// take the train mean (0 after scaling); missing one-hot groups stay all
/// zero in raw units.
pub fn fit_imputer(
    train_scaled: &AssembledTensor,
    params: &ScalerParams,
    dynamic: DynamicImputation,
) -> Imputer {
    let f = train_scaled.num_features();
    let fill = (0..f)
        .map(|c| {
            if c >= train_scaled.num_dynamic {
                if train_scaled.is_one_hot(c) {
                    -params.mean[c] / params.std[c]
                } else {
                    0.0
                }
            } else if dynamic == DynamicImputation::Median {
                let observed: Vec<f64> = (0..train_scaled.num_stays() * train_scaled.windows)
                    .filter(|r| train_scaled.mask[r * f + c] == 1)
                    .map(|r| train_scaled.values[r * f + c])
                    .collect();
                median(observed).unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .collect();
    Imputer { dynamic, fill }
}

/// Replaces every missing cell; the mask is left untouched. Under
/// forward fill, dynamic gaps repeat the previous window of the same stay,
/// and leading gaps become 0.
pub fn impute(t: &mut AssembledTensor, imputer: &Imputer) -> Result<()> {
    let f = t.num_features();
    if imputer.fill.len() != f {
        return Err(Error::TensorShape(format!(
            "imputer has {} columns, tensor {f}",
            imputer.fill.len()
        )));
    }
    let ffill = imputer.dynamic == DynamicImputation::ForwardFill;
    for i in 0..t.num_stays() {
        for c in 0..f {
            let mut last: Option<f64> = None;
            for w in 0..t.windows {
                let idx = (i * t.windows + w) * f + c;
                if t.mask[idx] == 1 {
                    last = Some(t.values[idx]);
                } else if ffill && c < t.num_dynamic {
                    t.values[idx] = last.unwrap_or(0.0);
                } else {
                    t.values[idx] = imputer.fill[c];
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dynamic(values: &[Option<f64>], n: usize, w: usize, f: usize) -> WindowedDynamic {
        WindowedDynamic {
            stays: (0..n).map(|i| format!("s{i}")).collect(),
            windows: w,
            window_hours: 1,
            features: (0..f).map(|c| format!("d{c}")).collect(),
            values: values.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            observed: values.iter().map(Option::is_some).collect(),
        }
    }

    fn statics(rows: &[[Option<f64>; 3]]) -> StaticMatrix {
        StaticMatrix {
            stays: (0..rows.len()).map(|i| format!("s{i}")).collect(),
            columns: vec!["age".into(), "g=F".into(), "g=M".into()],
            groups: vec![1..3],
            values: rows.iter().flatten().map(|v| v.unwrap_or(0.0)).collect(),
            observed: rows.iter().flatten().map(Option::is_some).collect(),
        }
    }

    #[test]
    fn assemble_shapes_and_broadcast() {
        let d = dynamic(&[Some(1.0), None, Some(2.0), Some(3.0)], 1, 2, 2);
        let s = statics(&[[Some(70.0), Some(1.0), Some(0.0)]]);
        let t = assemble(Some(&d), Some(&s), 2).unwrap();
        assert_eq!(t.shape(), [1, 2, 5]);
        assert_eq!(t.num_dynamic, 2);
        assert_eq!(t.feature_names[2], "age");
        assert_eq!(t.mask, vec![1, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(t.values[t.index(0, 0, 2)], t.values[t.index(0, 1, 2)]);
        assert_eq!(t.one_hot_groups, vec![3..5]);
    }

    #[test]
    fn stay_order_mismatch() {
        let d = dynamic(&[Some(1.0), Some(1.0)], 2, 1, 1);
        let mut s = statics(&[[Some(1.0); 3], [Some(1.0); 3]]);
        s.stays.swap(0, 1);
        assert!(matches!(
            assemble(Some(&d), Some(&s), 1),
            Err(Error::TensorShape(_))
        ));
    }

    #[test]
    fn scaler_examples() {
        let d = dynamic(
            &[Some(1.0), Some(5.0), None, Some(2.0), Some(5.0), None, Some(3.0), None, None],
            3,
            1,
            3,
        );
        let t = assemble(Some(&d), None, 1).unwrap();
        let p = fit_scaler(&t);
        assert_eq!(p.mean[0], 2.0);
        assert!((p.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!((p.mean[1], p.std[1]), (5.0, 1.0));
        assert_eq!((p.mean[2], p.std[2]), (0.0, 1.0));
        assert_eq!(p.degenerate, vec![false, true, true]);
        assert_eq!(p.observed_count, vec![3, 2, 0]);
    }

    #[test]
    fn forward_fill_and_leading_gap() {
        let d = dynamic(&[Some(1.5), None, None, None, Some(2.0), None], 2, 3, 1);
        let mut t = assemble(Some(&d), None, 3).unwrap();
        let imp = Imputer {
            dynamic: DynamicImputation::ForwardFill,
            fill: vec![0.0],
        };
        let mask = t.mask.clone();
        impute(&mut t, &imp).unwrap();
        assert_eq!(t.values, vec![1.5, 1.5, 1.5, 0.0, 2.0, 2.0]);
        assert_eq!(t.mask, mask);
    }

    #[test]
    fn static_imputation() {
        let s = statics(&[
            [Some(60.0), Some(1.0), Some(0.0)],
            [Some(80.0), Some(0.0), Some(1.0)],
            [None, None, None],
        ]);
        let mut t = assemble(None, Some(&s), 2).unwrap();
        let p = fit_scaler(&t);
        apply_scaler(&mut t, &p).unwrap();
        let imp = fit_imputer(&t, &p, DynamicImputation::Zero);
        impute(&mut t, &imp).unwrap();
        let row = t.index(2, 1, 0);
        assert_eq!(t.values[row], 0.0);
        for c in 1..3 {
            let raw = t.values[row + c] * p.std[c] + p.mean[c];
            assert!(raw.abs() < 1e-12);
        }
        assert!(t.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn median_imputation() {
        let d = dynamic(&[Some(1.0), Some(2.0), Some(10.0), None], 4, 1, 1);
        let mut t = assemble(Some(&d), None, 1).unwrap();
        let p = fit_scaler(&t);
        apply_scaler(&mut t, &p).unwrap();
        let imp = fit_imputer(&t, &p, DynamicImputation::Median);
        impute(&mut t, &imp).unwrap();
        let expected = (2.0 - p.mean[0]) / p.std[0];
        assert!((t.values[3] - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn scaled_train_moments_and_roundtrip(
            cells in proptest::collection::vec(proptest::option::weighted(0.7, -1e3f64..1e3), 24),
        ) {
            let d = dynamic(&cells, 4, 3, 2);
            let raw = assemble(Some(&d), None, 3).unwrap();
            let p = fit_scaler(&raw);
            let mut t = raw.clone();
            apply_scaler(&mut t, &p).unwrap();
            for c in 0..2 {
                let obs: Vec<f64> = (0..12).filter(|r| t.mask[r * 2 + c] == 1).map(|r| t.values[r * 2 + c]).collect();
                if obs.len() >= 2 && !p.degenerate[c] {
                    let m = obs.iter().sum::<f64>() / obs.len() as f64;
                    let v = obs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / obs.len() as f64;
                    prop_assert!(m.abs() < 1e-6);
                    prop_assert!((v.sqrt() - 1.0).abs() < 1e-6);
                }
            }
            let mut back = t.clone();
            unscale(&mut back, &p).unwrap();
            for i in 0..raw.values.len() {
                if raw.mask[i] == 1 {
                    prop_assert!((back.values[i] - raw.values[i]).abs() <= 1e-9 * raw.values[i].abs().max(1.0));
                }
            }
            let mask = t.mask.clone();
            for strategy in [DynamicImputation::Zero, DynamicImputation::ForwardFill, DynamicImputation::Median] {
                let mut u = t.clone();
                impute(&mut u, &fit_imputer(&t, &p, strategy)).unwrap();
                prop_assert_eq!(&u.mask, &mask);
                prop_assert!(u.values.iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn assembly_commutes_with_row_blocks(
            cells in proptest::collection::vec(proptest::option::of(-5.0f64..5.0), 24),
        ) {
            let d = dynamic(&cells, 4, 3, 2);
            let whole = assemble(Some(&d), None, 3).unwrap();
            let mut top = d.clone();
            top.stays.truncate(2);
            top.values.truncate(12);
            top.observed.truncate(12);
            let a = assemble(Some(&top), None, 3).unwrap();
            prop_assert_eq!(&a.mask[..], &whole.mask[..12]);
        }
    }
}
