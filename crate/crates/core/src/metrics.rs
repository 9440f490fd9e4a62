//! Ranking metrics.

use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann–Whitney rank statistic. Tied scores
/// contribute one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data(format!(
            "AUC needs both classes, got {positives} positive and {negatives} negative"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("AUC input contains NaN scores".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pairwise definition, used as an oracle.
    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    total += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / total
    }

    #[test]
    fn examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.2, 0.8], &[1, 0]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.5, 0.1], &[1, 1]).is_err());
    }

    #[test]
    fn matches_pairwise_definition_with_ties() {
        let scores = [0.1, 0.4, 0.4, 0.35, 0.8, 0.4, 0.1, 0.9];
        let labels = [0, 1, 0, 1, 1, 0, 1, 0];
        let a = roc_auc(&scores, &labels).unwrap();
        assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let scores = [0.3, -1.2, 4.0, 0.3, 2.2, 0.0];
        let labels = [1, 0, 1, 0, 0, 1];
        let t: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
        assert_eq!(
            roc_auc(&scores, &labels).unwrap(),
            roc_auc(&t, &labels).unwrap()
        );
    }
}
