//! AUC, log loss and model evaluation.

use crate::compute::ops;
use crate::compute::ParamStore;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Network;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    pub count: usize,
    pub positive_ratio: f64,
}

/// Area under the ROC curve as the Mann-Whitney statistic over average
/// ranks, so tied scores count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count();
        rank_sum += mean_rank * tied_pos as f64;
        start = end;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean log loss of logits against 0/1 labels.
pub fn mean_logloss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Empty("predictions".into()));
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| ops::logloss(z, f64::from(y)))
        .sum();
    Ok(total / logits.len() as f64)
}

pub fn report(logits: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    Ok(MetricsReport {
        auc: auc(logits, labels)?,
        logloss: mean_logloss(logits, labels)?,
        count: labels.len(),
        positive_ratio: positives as f64 / labels.len() as f64,
    })
}

/// Evaluation-mode logits for every instance, in order.
pub fn predict_all<N: Network>(
    model: &N,
    params: &ParamStore,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut logits = Vec::with_capacity(data.len());
    for chunk in rows.chunks(batch_size) {
        logits.extend(model.predict(params, &data.batch(chunk))?);
    }
    Ok(logits)
}

pub fn evaluate<N: Network>(
    model: &N,
    params: &ParamStore,
    data: &Dataset,
    batch_size: usize,
) -> Result<MetricsReport> {
    let logits = predict_all(model, params, data, batch_size)?;
    report(&logits, data.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.8, 0.8, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.625);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1], &[1, 0]).is_err());
        assert!(auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<f64> = (0..1000)
            .map(|_| f64::from(rng.gen_range(0..50)) / 10.0)
            .collect();
        let labels: Vec<u8> = (0..1000).map(|_| rng.gen_range(0..=1)).collect();
        assert!((auc(&scores, &labels).unwrap() - brute_force(&scores, &labels)).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_increasing_transforms(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut labels: Vec<u8> = (0..200).map(|_| rng.gen_range(0..=1)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| ops::sigmoid(2.0 * s + 1.0)).collect();
            prop_assert!((a - auc(&mapped, &labels).unwrap()).abs() <= 1e-12);
            prop_assert!((a - brute_force(&scores, &labels)).abs() <= 1e-12);
        }
    }

    #[test]
    fn logloss_examples() {
        assert!((mean_logloss(&[0.0], &[1]).unwrap() - 2f64.ln()).abs() <= 1e-12);
        // constant predictor at the positive ratio gives the label entropy
        let alpha: f64 = 0.3;
        let z = (alpha / (1.0 - alpha)).ln();
        let labels: Vec<u8> = (0..10).map(|i| u8::from(i < 3)).collect();
        let entropy = -alpha * alpha.ln() - (1.0 - alpha) * (1.0 - alpha).ln();
        assert!((mean_logloss(&[z; 10], &labels).unwrap() - entropy).abs() <= 1e-9);
        assert!(mean_logloss(&[], &[]).is_err());
    }
}
