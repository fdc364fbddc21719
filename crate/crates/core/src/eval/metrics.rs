//! Ranking and thresholded classification metrics.
//!
//! ROC-AUC is the Mann-Whitney statistic with ties counted one half;
//! PR-AUC uses the average-precision step form with tied scores processed
//! as blocks (no trapezoidal interpolation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y).count();
    (pos, labels.len() - pos)
}

fn check_paired(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty score list".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score; tied scores form contiguous blocks.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    idx
}

/// Area under the ROC curve via midranks (equals normalized Mann-Whitney U).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_paired(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC-AUC needs both classes".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block [i, j)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc.clamp(0.0, 1.0))
}

/// ROC curve points `(fpr, tpr)` with tied scores processed as blocks.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_paired(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes".into()));
    }
    let idx = descending_order(scores);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    Ok(points)
}

/// Average precision: `sum_blocks (delta recall) * precision`.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_paired(scores, labels)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("PR-AUC needs at least one positive".into()));
    }
    let idx = descending_order(scores);
    let mut ap = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// PR curve points `(recall, precision)` per descending-score block.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_paired(scores, labels)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs at least one positive".into()));
    }
    let idx = descending_order(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
        i = j;
    }
    Ok(points)
}

/// Pick the decision threshold maximizing F1 on training scores.
///
/// Candidates are 0, 1 and the midpoints between adjacent distinct sorted
/// scores; F1 is piecewise constant so the search is exact. Ties break
/// toward the higher threshold. All-positive labels degenerate to 0 (every
/// prediction positive is optimal); all-negative labels are an error since
/// F1 is identically zero.
pub fn select_threshold_max_f1(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_paired(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "threshold selection needs at least one positive label".into(),
        ));
    }
    if n_neg == 0 {
        return Ok(0.0);
    }

    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    sorted.dedup();
    let mut candidates = vec![0.0, 1.0];
    candidates.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut best_threshold = 0.0;
    let mut best_f1 = -1.0;
    for &threshold in &candidates {
        let m = thresholded_metrics(scores, labels, threshold)?;
        if m.f1 >= best_f1 {
            best_f1 = m.f1;
            best_threshold = threshold;
        }
    }
    Ok(best_threshold)
}

/// Confusion-matrix metrics at a fixed threshold (`score >= threshold` is a
/// positive prediction). Precision is 0 when nothing is predicted positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdedMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
}

pub fn thresholded_metrics(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ThresholdedMetrics> {
    check_paired(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = labels.len() as f64;
    let accuracy = (tp + tn) as f64 / n;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let tnr = if tn + fp > 0 {
        tn as f64 / (tn + fp) as f64
    } else {
        0.0
    };
    Ok(ThresholdedMetrics {
        accuracy,
        precision,
        recall,
        f1,
        balanced_accuracy: (recall + tnr) / 2.0,
    })
}

/// All reported metrics for one score/label set at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
}

pub fn compute_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Metrics> {
    let t = thresholded_metrics(scores, labels, threshold)?;
    Ok(Metrics {
        roc_auc: roc_auc(scores, labels)?,
        pr_auc: pr_auc(scores, labels)?,
        accuracy: t.accuracy,
        precision: t.precision,
        recall: t.recall,
        f1: t.f1,
        balanced_accuracy: t.balanced_accuracy,
    })
}

/// Metrics for pooled verdicts whose decisions were made at per-fold
/// thresholds: ranking metrics from the scores, confusion metrics from the
/// recorded decisions.
pub fn metrics_with_decisions(
    scores: &[f64],
    labels: &[bool],
    decisions: &[bool],
) -> Result<Metrics> {
    if decisions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} decisions but {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    // reuse the confusion arithmetic by encoding decisions as 0/1 scores
    let as_scores: Vec<f64> = decisions.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    let t = thresholded_metrics(&as_scores, labels, 0.5)?;
    Ok(Metrics {
        roc_auc: roc_auc(scores, labels)?,
        pr_auc: pr_auc(scores, labels)?,
        accuracy: t.accuracy,
        precision: t.precision,
        recall: t.recall,
        f1: t.f1,
        balanced_accuracy: t.balanced_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) pair-counting oracle with ties counted one half.
    fn roc_auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            if !yi {
                continue;
            }
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if yj || i == j {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn roc_perfect_and_inverted() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
        let inverted = [false, false, true, true];
        assert_eq!(roc_auc(&scores, &inverted).unwrap(), 0.0);
    }

    #[test]
    fn roc_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 200;
            // quantize scores so ties occur
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 20.0).round() / 20.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
            if labels.iter().all(|&b| b) || !labels.iter().any(|&b| b) {
                continue;
            }
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = roc_auc_oracle(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn roc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (5.0 * s).exp()).collect();
        let b = roc_auc(&warped, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn roc_single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    /// Exhaustive threshold-sweep oracle for average precision.
    fn pr_auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&y| y).count() as f64;
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &y)| s >= t && y)
                .count() as f64;
            let pp = scores.iter().filter(|&&s| s >= t).count() as f64;
            let recall = tp / n_pos;
            let precision = tp / pp;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn pr_perfect_ranking_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(pr_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn pr_constant_scores_equal_prevalence() {
        let scores = [0.5; 10];
        let labels = [true, true, true, false, false, false, false, false, false, false];
        let ap = pr_auc(&scores, &labels).unwrap();
        assert!((ap - 0.3).abs() < 1e-12);
    }

    #[test]
    fn pr_matches_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = 120;
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 10.0).round() / 10.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.25).collect();
            if !labels.iter().any(|&b| b) {
                continue;
            }
            let fast = pr_auc(&scores, &labels).unwrap();
            let slow = pr_auc_oracle(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn threshold_selection_example() {
        let scores = [0.9, 0.8, 0.1];
        let labels = [true, true, false];
        let t = select_threshold_max_f1(&scores, &labels).unwrap();
        assert!((t - 0.45).abs() < 1e-12);
        let m = thresholded_metrics(&scores, &labels, t).unwrap();
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn threshold_all_positive_degenerates_to_zero() {
        let t = select_threshold_max_f1(&[0.2, 0.7], &[true, true]).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn threshold_equal_scores_predicts_all_positive() {
        let t = select_threshold_max_f1(&[0.4, 0.4, 0.4], &[true, false, true]).unwrap();
        assert!(t <= 0.4, "threshold {t} should keep every prediction positive");
        let m = thresholded_metrics(&[0.4, 0.4, 0.4], &[true, false, true], t).unwrap();
        assert!(m.recall == 1.0);
    }

    #[test]
    fn threshold_enumeration_oracle() {
        // exhaustive check that no candidate beats the selected threshold
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<f64> = (0..40).map(|_| (rng.random::<f64>() * 8.0).round() / 8.0).collect();
        let labels: Vec<bool> = (0..40).map(|_| rng.random::<f64>() < 0.4).collect();
        let best = select_threshold_max_f1(&scores, &labels).unwrap();
        let best_f1 = thresholded_metrics(&scores, &labels, best).unwrap().f1;
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let f1 = thresholded_metrics(&scores, &labels, t).unwrap().f1;
            assert!(f1 <= best_f1 + 1e-12, "threshold {t} beats selected: {f1} > {best_f1}");
        }
    }

    #[test]
    fn thresholded_metrics_perfect() {
        let m = thresholded_metrics(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!(
            m,
            ThresholdedMetrics {
                accuracy: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                balanced_accuracy: 1.0
            }
        );
    }

    #[test]
    fn thresholded_metrics_all_negative_predictions() {
        let m = thresholded_metrics(&[0.1, 0.2, 0.3], &[true, false, false], 0.9).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.balanced_accuracy, 0.5);
    }

    #[test]
    fn thresholded_metrics_match_hand_count() {
        let scores = [0.9, 0.7, 0.6, 0.4, 0.3, 0.1];
        let labels = [true, false, true, true, false, false];
        let m = thresholded_metrics(&scores, &labels, 0.5).unwrap();
        // tp=2 (0.9, 0.6), fp=1 (0.7), fn=1 (0.4), tn=2
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.balanced_accuracy - (2.0 / 3.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn curves_have_expected_endpoints() {
        let scores = [0.9, 0.8, 0.4, 0.2];
        let labels = [true, false, true, false];
        let roc = roc_curve(&scores, &labels).unwrap();
        assert_eq!(roc.first().unwrap(), &(0.0, 0.0));
        assert_eq!(roc.last().unwrap(), &(1.0, 1.0));
        let pr = pr_curve(&scores, &labels).unwrap();
        assert_eq!(pr.last().unwrap().0, 1.0);
    }
}
