//! MSE, accuracy and AUC, with mergeable accumulation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::Field;
use crate::error::{check_dim, Error, Result};
use crate::model::predicted_class;

/// Area under the ROC curve via the rank-sum estimator, with midranks for ties.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_dim("auc labels", scores.len(), labels.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.iter().filter(|&&y| y == 0.0).count();
    if positives + negatives != labels.len() {
        return Err(Error::invalid("labels", "must be 0 or 1"));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Running MSE/accuracy sums plus every `(score, label)` pair for AUC.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    count: usize,
    squared_error: f64,
    correct: usize,
    scores: Vec<f64>,
    labels: Vec<f64>,
}

/// Final values of a [`MetricAccumulator`]. `auc` is absent for single-class data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mse: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, prediction: f64, label: f64) {
        self.count += 1;
        self.squared_error += (prediction - label) * (prediction - label);
        if predicted_class(prediction) == label {
            self.correct += 1;
        }
        self.scores.push(prediction);
        self.labels.push(label);
    }

    pub fn extend(&mut self, predictions: &[f64], labels: &[f64]) -> Result<()> {
        check_dim("metric labels", predictions.len(), labels.len())?;
        for (p, y) in predictions.iter().zip(labels) {
            self.push(*p, *y);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.count += other.count;
        self.squared_error += other.squared_error;
        self.correct += other.correct;
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Empty("metric accumulator"));
        }
        Ok(self.squared_error / self.count as f64)
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Empty("metric accumulator"));
        }
        Ok(self.correct as f64 / self.count as f64)
    }

    pub fn error_rate(&self) -> Result<f64> {
        Ok(1.0 - self.accuracy()?)
    }

    pub fn auc(&self) -> Result<f64> {
        auc(&self.scores, &self.labels)
    }

    pub fn metrics(&self) -> Result<Metrics> {
        Ok(Metrics {
            count: self.count,
            mse: self.mse()?,
            accuracy: self.accuracy()?,
            auc: match self.auc() {
                Ok(a) => Some(a),
                Err(Error::UndefinedAuc { .. }) => None,
                Err(e) => return Err(e),
            },
        })
    }
}

/// One prediction tagged with the frequencies its ids had when it was made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRecord {
    pub user_frequency: u64,
    pub item_frequency: u64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    /// Inclusive lower bound; the bucket is `[lo, lo + width)`.
    pub lo: u64,
    pub accuracy: f64,
    pub count: usize,
}

/// Mean accuracy per frequency bucket of width `bucket_width`, per field.
/// Empty buckets are omitted.
pub fn frequency_bucketed_accuracy(
    log: &[FrequencyRecord],
    bucket_width: u64,
) -> Result<BTreeMap<Field, Vec<BucketRow>>> {
    if log.is_empty() {
        return Err(Error::Empty("frequency log"));
    }
    if bucket_width == 0 {
        return Err(Error::invalid("bucket_width", "must be >= 1"));
    }
    let mut out = BTreeMap::new();
    for field in Field::ALL {
        let mut buckets: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for r in log {
            let f = match field {
                Field::User => r.user_frequency,
                Field::Item => r.item_frequency,
            };
            let e = buckets.entry(f / bucket_width).or_default();
            e.0 += usize::from(r.correct);
            e.1 += 1;
        }
        let rows = buckets
            .into_iter()
            .map(|(b, (correct, count))| BucketRow {
                lo: b * bucket_width,
                accuracy: correct as f64 / count as f64,
                count,
            })
            .collect();
        out.insert(field, rows);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Probability a random positive outscores a random negative, ties counted half.
    fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_and_constant_scores() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined_not_zero() {
        assert!(matches!(
            auc(&[0.1, 0.9], &[1.0, 1.0]),
            Err(Error::UndefinedAuc { positives: 2, negatives: 0 })
        ));
        assert!(auc(&[0.1], &[1.0, 0.0]).is_err());
        assert!(auc(&[0.1, 0.2], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(2..=200);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            labels[0] = 0.0;
            labels[1] = 1.0;
            let a = auc(&scores, &labels).unwrap();
            assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-9);
        }
    }

    #[test]
    fn accumulator_basics() {
        let mut acc = MetricAccumulator::new();
        assert!(acc.mse().is_err());
        acc.extend(&[0.9, 0.4, 0.6], &[1.0, 1.0, 0.0]).unwrap();
        assert!((acc.mse().unwrap() - (0.01 + 0.36 + 0.36) / 3.0).abs() < 1e-15);
        assert!((acc.accuracy().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let m = acc.metrics().unwrap();
        assert_eq!(m.auc, Some(0.5));
        let mut single = MetricAccumulator::new();
        single.push(0.7, 1.0);
        assert_eq!(single.metrics().unwrap().auc, None);
    }

    #[test]
    fn buckets_skip_empty_ranges() {
        let rec = |u, i, c| FrequencyRecord {
            user_frequency: u,
            item_frequency: i,
            correct: c,
        };
        let log = [rec(3, 120, true), rec(49, 10, false), rec(130, 10, true)];
        let t = frequency_bucketed_accuracy(&log, 50).unwrap();
        let users = &t[&Field::User];
        assert_eq!(users.iter().map(|r| r.lo).collect::<Vec<_>>(), vec![0, 100]);
        assert_eq!(users[0].accuracy, 0.5);
        assert_eq!(users[0].count, 2);
        let items = &t[&Field::Item];
        assert_eq!(items.iter().map(|r| r.lo).collect::<Vec<_>>(), vec![0, 100]);
        assert!(frequency_bucketed_accuracy(&[], 50).is_err());
    }

    #[test]
    fn all_correct_gives_unit_accuracy_everywhere() {
        let log: Vec<_> = (1..300)
            .map(|f| FrequencyRecord {
                user_frequency: f,
                item_frequency: 2 * f,
                correct: true,
            })
            .collect();
        for rows in frequency_bucketed_accuracy(&log, 37).unwrap().values() {
            assert!(rows.iter().all(|r| r.accuracy == 1.0));
        }
    }

    proptest! {
        #[test]
        fn buckets_match_group_by_oracle(
            raw in proptest::collection::vec((0u64..300, 0u64..300, any::<bool>()), 1..200),
            width in 1u64..80,
        ) {
            let log: Vec<FrequencyRecord> = raw
                .iter()
                .map(|&(u, i, c)| FrequencyRecord { user_frequency: u, item_frequency: i, correct: c })
                .collect();
            let table = frequency_bucketed_accuracy(&log, width).unwrap();
            for (field, pick) in [(Field::User, 0usize), (Field::Item, 1usize)] {
                let mut groups: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
                for &(u, i, c) in &raw {
                    let f = [u, i][pick];
                    groups.entry(f - f % width).or_default().push(c);
                }
                let rows = &table[&field];
                prop_assert_eq!(rows.len(), groups.len());
                for (row, (lo, members)) in rows.iter().zip(&groups) {
                    prop_assert_eq!(row.lo, *lo);
                    prop_assert_eq!(row.count, members.len());
                    let correct = members.iter().filter(|c| **c).count();
                    prop_assert_eq!(row.accuracy, correct as f64 / members.len() as f64);
                }
            }
        }

        #[test]
        fn auc_is_invariant_under_monotone_transforms(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..120),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
            let labels: Vec<f64> = raw.iter().map(|(_, l)| f64::from(u8::from(*l))).collect();
            prop_assume!(labels.contains(&0.0) && labels.contains(&1.0));
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn merging_equals_concatenating(
            a in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 0..50),
            b in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..50),
        ) {
            let acc = |xs: &[(f64, bool)]| {
                let mut m = MetricAccumulator::new();
                for (p, y) in xs {
                    m.push(*p, f64::from(u8::from(*y)));
                }
                m
            };
            let mut merged = acc(&a);
            merged.merge(&acc(&b));
            let joined: Vec<_> = a.iter().chain(&b).copied().collect();
            let whole = acc(&joined);
            prop_assert_eq!(merged.count(), whole.count());
            prop_assert_eq!(merged.accuracy().unwrap(), whole.accuracy().unwrap());
            prop_assert!((merged.mse().unwrap() - whole.mse().unwrap()).abs() < 1e-12);
            prop_assert!((merged.accuracy().unwrap() + merged.error_rate().unwrap() - 1.0).abs() < 1e-15);
        }
    }
}
