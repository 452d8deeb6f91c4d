use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SurvivalLabels;

/// Rates and duration summaries for one split. Medians use the lower-median
/// convention (element `(n - 1) / 2` of the sorted values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStatistics {
    pub n: usize,
    pub num_risks: u8,
    pub event_rate: f64,
    pub censor_rate: f64,
    /// Fraction of stays with each event code `1..=K`.
    pub event_rate_by_code: BTreeMap<u8, f64>,
    pub mean_duration: Option<f64>,
    pub median_duration: Option<f64>,
    pub mean_duration_event: Option<f64>,
    pub median_duration_event: Option<f64>,
    pub mean_duration_censored: Option<f64>,
    pub median_duration_censored: Option<f64>,
    /// Mean time to each event code among stays with that code.
    pub mean_event_time_by_code: BTreeMap<u8, Option<f64>>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub(crate) fn lower_median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Some(s[(s.len() - 1) / 2])
}

pub fn label_statistics(labels: &SurvivalLabels) -> LabelStatistics {
    let n = labels.len();
    let denom = n.max(1) as f64;
    let mut by_code: BTreeMap<u8, Vec<f64>> = (1..=labels.num_risks).map(|k| (k, vec![])).collect();
    let mut event_times = Vec::new();
    let mut censored_times = Vec::new();
    for (&t, &e) in labels.durations.iter().zip(&labels.events) {
        if e == 0 {
            censored_times.push(t);
        } else {
            event_times.push(t);
            by_code.entry(e).or_default().push(t);
        }
    }
    LabelStatistics {
        n,
        num_risks: labels.num_risks,
        event_rate: event_times.len() as f64 / denom,
        censor_rate: censored_times.len() as f64 / denom,
        event_rate_by_code: by_code
            .iter()
            .map(|(&k, v)| (k, v.len() as f64 / denom))
            .collect(),
        mean_duration: mean(&labels.durations),
        median_duration: lower_median(&labels.durations),
        mean_duration_event: mean(&event_times),
        median_duration_event: lower_median(&event_times),
        mean_duration_censored: mean(&censored_times),
        median_duration_censored: lower_median(&censored_times),
        mean_event_time_by_code: by_code.iter().map(|(&k, v)| (k, mean(v))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(d: &[f64], e: &[u8], k: u8) -> SurvivalLabels {
        SurvivalLabels::new(
            (0..d.len()).map(|i| i.to_string()).collect(),
            d.to_vec(),
            e.to_vec(),
            k,
        )
        .unwrap()
    }

    #[test]
    fn rates() {
        let s = label_statistics(&labels(&[1.0, 2.0, 3.0, 4.0], &[1, 0, 0, 0], 1));
        assert_eq!(s.event_rate, 0.25);
        assert_eq!(s.censor_rate, 0.75);
        assert_eq!(s.event_rate_by_code[&1], 0.25);
    }

    #[test]
    fn durations() {
        let s = label_statistics(&labels(&[10.0, 20.0, 30.0], &[1, 1, 1], 1));
        assert_eq!(s.mean_duration, Some(20.0));
        assert_eq!(s.median_duration, Some(20.0));
        assert_eq!(s.mean_duration_censored, None);
    }

    #[test]
    fn lower_median_of_even_count() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
    }

    proptest! {
        #[test]
        fn rates_sum_to_one(events in proptest::collection::vec(0u8..=4, 1..200)) {
            let d = vec![1.0; events.len()];
            let s = label_statistics(&labels(&d, &events, 4));
            let total: f64 = s.event_rate_by_code.values().sum::<f64>() + s.censor_rate;
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&s.event_rate));
        }
    }
}
