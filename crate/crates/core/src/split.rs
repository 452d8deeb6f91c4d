//! Patient-level train/validation/test partition.
//!
//! Subject ids are sorted, then shuffled with ChaCha8 seeded from the run
//! seed. The first `floor(r_train * P)` subjects go to train, the next
//! `floor(r_val * P)` to validation, and the remainder to test.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SplitRatios;
use crate::error::{Error, Result};
use crate::ingest::CohortTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub patients: usize,
    pub stays: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub subjects: BTreeMap<String, Split>,
    pub stays: BTreeMap<String, Split>,
    pub counts: BTreeMap<Split, SplitCounts>,
}

impl SplitAssignment {
    /// Stay ids of `split` in cohort order.
    pub fn stays_in(&self, cohort: &CohortTable, split: Split) -> Vec<String> {
        cohort
            .records
            .iter()
            .filter(|r| self.stays.get(&r.stay_id) == Some(&split))
            .map(|r| r.stay_id.clone())
            .collect()
    }
}

/// Number of subjects in train and validation for `p` subjects.
pub fn split_sizes(p: usize, ratios: &SplitRatios) -> (usize, usize) {
    let n_train = (ratios.train * p as f64 + 1e-9).floor() as usize;
    let n_val = (ratios.val * p as f64 + 1e-9).floor() as usize;
    (n_train.min(p), n_val.min(p - n_train.min(p)))
}

pub fn split_patients(
    cohort: &CohortTable,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    let mut subjects: Vec<String> = cohort.records.iter().map(|r| r.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let p = subjects.len();
    if p < 3 {
        return Err(Error::SplitTooSmall(p));
    }
    let (n_train, n_val) = split_sizes(p, ratios);
    if n_train == 0 {
        return Err(Error::SplitEmpty("train"));
    }
    if n_val == 0 {
        return Err(Error::SplitEmpty("val"));
    }
    if n_train + n_val == p {
        return Err(Error::SplitEmpty("test"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let mut by_subject = BTreeMap::new();
    let mut counts: BTreeMap<Split, SplitCounts> =
        Split::ALL.iter().map(|&s| (s, SplitCounts::default())).collect();
    for (i, subject) in subjects.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        counts.get_mut(&split).unwrap().patients += 1;
        by_subject.insert(subject, split);
    }
    let mut by_stay = BTreeMap::new();
    for r in &cohort.records {
        let split = by_subject[&r.subject_id];
        counts.get_mut(&split).unwrap().stays += 1;
        by_stay.insert(r.stay_id.clone(), split);
    }
    for s in Split::ALL {
        let c = counts[&s];
        log::info!("split={s} patients={} stays={}", c.patients, c.stays);
    }
    Ok(SplitAssignment {
        seed,
        subjects: by_subject,
        stays: by_stay,
        counts,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::Dataset;
    use crate::ingest::{CohortRecord, FilterCounts};
    use proptest::prelude::*;

    pub(crate) fn cohort_of(pairs: &[(String, String)]) -> CohortTable {
        CohortTable {
            dataset: Dataset::Eicu,
            records: pairs
                .iter()
                .map(|(subject, stay)| CohortRecord {
                    subject_id: subject.clone(),
                    stay_id: stay.clone(),
                    duration_hours: 30.0,
                    raw_outcome: "Alive".into(),
                    age_years: 50.0,
                    static_attributes: BTreeMap::new(),
                })
                .collect(),
            attribute_names: vec![],
            source_stay_order: pairs.iter().map(|p| p.1.clone()).collect(),
            filter_counts: FilterCounts::default(),
        }
    }

    fn ratios() -> SplitRatios {
        SplitRatios {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }

    #[test]
    fn hundred_subjects() {
        let pairs: Vec<_> = (0..100).map(|i| (format!("p{i}"), format!("s{i}"))).collect();
        let a = split_patients(&cohort_of(&pairs), &ratios(), 42).unwrap();
        assert_eq!(a.counts[&Split::Train].patients, 70);
        assert_eq!(a.counts[&Split::Val].patients, 15);
        assert_eq!(a.counts[&Split::Test].patients, 15);
    }

    #[test]
    fn stays_follow_subject() {
        let mut pairs: Vec<_> = (0..20).map(|i| (format!("p{i}"), format!("s{i}"))).collect();
        pairs.push(("p3".into(), "extra1".into()));
        pairs.push(("p3".into(), "extra2".into()));
        let a = split_patients(&cohort_of(&pairs), &ratios(), 7).unwrap();
        assert_eq!(a.stays["s3"], a.stays["extra1"]);
        assert_eq!(a.stays["s3"], a.stays["extra2"]);
    }

    #[test]
    fn too_small_and_empty() {
        let two: Vec<_> = (0..2).map(|i| (format!("p{i}"), format!("s{i}"))).collect();
        assert!(matches!(
            split_patients(&cohort_of(&two), &ratios(), 1),
            Err(Error::SplitTooSmall(2))
        ));
        let five: Vec<_> = (0..5).map(|i| (format!("p{i}"), format!("s{i}"))).collect();
        assert!(matches!(
            split_patients(&cohort_of(&five), &ratios(), 1),
            Err(Error::SplitEmpty("val"))
        ));
    }

    #[test]
    fn seed_changes_assignment() {
        let pairs: Vec<_> = (0..50).map(|i| (format!("p{i}"), format!("s{i}"))).collect();
        let c = cohort_of(&pairs);
        let a = split_patients(&c, &ratios(), 1).unwrap();
        let b = split_patients(&c, &ratios(), 1).unwrap();
        let other = split_patients(&c, &ratios(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.subjects, other.subjects);
    }

    proptest! {
        #[test]
        fn partition_is_patient_level_and_order_free(
            stays_per in proptest::collection::vec(1usize..4, 10..60),
            seed in any::<u64>(),
        ) {
            let mut pairs = vec![];
            for (p, &k) in stays_per.iter().enumerate() {
                for s in 0..k {
                    pairs.push((format!("p{p}"), format!("s{p}_{s}")));
                }
            }
            let a = split_patients(&cohort_of(&pairs), &ratios(), seed).unwrap();
            prop_assert_eq!(a.stays.len(), pairs.len());
            for (subject, stay) in &pairs {
                prop_assert_eq!(a.stays[stay], a.subjects[subject]);
            }
            let total: usize = a.counts.values().map(|c| c.patients).sum();
            prop_assert_eq!(total, stays_per.len());
            pairs.reverse();
            let b = split_patients(&cohort_of(&pairs), &ratios(), seed).unwrap();
            prop_assert_eq!(a.subjects, b.subjects);
        }
    }
}
