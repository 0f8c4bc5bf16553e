use crate::error::{ClanError, Result};

/// Probability that a random `positive` score exceeds a random `negative`
/// score, ties counting one half (Mann-Whitney U / (n_pos * n_neg)).
///
/// Computed from midranks of the pooled, sorted scores.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(ClanError::Contract("auroc needs non-empty score lists".into()));
    }
    if positive.iter().chain(negative).any(|v| v.is_nan()) {
        return Err(ClanError::Numeric("auroc input contains NaN".into()));
    }
    let mut pooled: Vec<(f64, bool)> = positive
        .iter()
        .map(|v| (*v, true))
        .chain(negative.iter().map(|v| (*v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // sum of doubled midranks of the positive class; doubling keeps the
    // arithmetic in integers so the result is exact
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j, doubled midrank = i + 1 + j
        let mid2 = (i + 1 + j) as u128;
        let pos_in_group = pooled[i..j].iter().filter(|p| p.1).count() as u128;
        rank_sum2 += mid2 * pos_in_group;
        i = j;
    }
    let n_pos = positive.len() as u128;
    let n_neg = negative.len() as u128;
    // 2U = 2R - n_pos(n_pos+1)
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Linear-interpolated percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Decision threshold: the percentile of all scores at the new-class share.
pub fn percentile_threshold(scores: &[f64], is_known: &[bool]) -> f64 {
    let n_new = is_known.iter().filter(|k| !**k).count();
    percentile(scores, n_new as f64 / scores.len() as f64)
}

/// `(sensitivity + specificity) / 2` with known as the positive class and
/// `score > threshold` predicted known.
pub fn balanced_accuracy_at(scores: &[f64], is_known: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != is_known.len() {
        return Err(ClanError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            is_known.len()
        )));
    }
    let n_known = is_known.iter().filter(|k| **k).count();
    let n_new = is_known.len() - n_known;
    if n_known == 0 || n_new == 0 {
        return Err(ClanError::Contract(
            "balanced accuracy needs both known and new samples".into(),
        ));
    }
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (s, k) in scores.iter().zip(is_known) {
        let predicted_known = *s > threshold;
        match (k, predicted_known) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    let sensitivity = tp as f64 / n_known as f64;
    let specificity = tn as f64 / n_new as f64;
    Ok((sensitivity + specificity) / 2.0)
}

/// Balanced accuracy under the percentile threshold policy.
pub fn balanced_accuracy(scores: &[f64], is_known: &[bool]) -> Result<f64> {
    if scores.len() != is_known.len() || scores.is_empty() {
        return Err(ClanError::Shape("scores and labels must be non-empty and aligned".into()));
    }
    let threshold = percentile_threshold(scores, is_known);
    balanced_accuracy_at(scores, is_known, threshold)
}

/// ROC curve points `(fpr, tpr)` for external plotting.
pub fn roc_points(positive: &[f64], negative: &[f64]) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = positive.iter().chain(negative).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let tpr = positive.iter().filter(|s| **s >= t).count() as f64 / positive.len() as f64;
        let fpr = negative.iter().filter(|s| **s >= t).count() as f64 / negative.len() as f64;
        points.push((fpr, tpr));
    }
    points
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn worked_auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[0.3; 5]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.4, 0.9], &[0.3, 0.5]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3, 0.9], &[0.2, 0.4]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(
            balanced_accuracy(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]).unwrap(),
            1.0
        );
        // sensitivity 1, specificity 0.5
        let ba = balanced_accuracy_at(&[5.0, 4.0, 3.0, 1.0], &[true, true, false, false], 2.0).unwrap();
        assert_eq!(ba, 0.75);
        assert!(balanced_accuracy(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 2.0, 1.0, 0.0], 0.5), 1.5);
        assert_eq!(percentile(&[1.0], 0.3), 1.0);
    }

    #[test]
    fn std_only_for_two_or_more() {
        assert_eq!(mean_std(&[0.7]), (0.7, None));
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]), (0.5, Some(0.0)));
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count(
            pos in proptest::collection::vec(0u8..6, 1..50),
            neg in proptest::collection::vec(0u8..6, 1..50),
        ) {
            let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
            let a = auroc(&pos, &neg).unwrap();
            prop_assert_eq!(a, pair_count(&pos, &neg));
            prop_assert_eq!(a + auroc(&neg, &pos).unwrap(), 1.0);
            // strictly increasing transform
            let f = |v: &f64| (v * 0.3).exp() - 7.0;
            let pt: Vec<f64> = pos.iter().map(f).collect();
            let nt: Vec<f64> = neg.iter().map(f).collect();
            prop_assert_eq!(auroc(&pt, &nt).unwrap(), a);
        }

        #[test]
        fn balanced_accuracy_invariant_under_monotone_maps(
            scores in proptest::collection::vec(-10i32..10, 2..40),
            split in 1usize..39,
        ) {
            let n = scores.len();
            let split = split.min(n - 1).max(1);
            let known: Vec<bool> = (0..n).map(|i| i < split).collect();
            let s: Vec<f64> = scores.iter().map(|v| *v as f64).collect();
            let t: Vec<f64> = s.iter().map(|v| v.powi(3) + 4.0 * v).collect();
            // the percentile threshold is an order statistic (or interpolation
            // between two) so only the induced ordering matters
            let a = balanced_accuracy(&s, &known).unwrap();
            let b = balanced_accuracy(&t, &known).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
