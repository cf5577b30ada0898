use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::compute::ops::check_dropout_rate;
use crate::error::{Error, Result};

/// Smoothing constant added to both distributions.
const KL_SMOOTHING: f64 = 1e-8;

/// `Σ q ln((q + 1e-8) / (p + 1e-8))`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| qi * ((qi + KL_SMOOTHING) / (pi + KL_SMOOTHING)).ln())
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutBiasConfig {
    pub categories: usize,
    pub batch_sizes: Vec<usize>,
    pub rates: Vec<f64>,
    pub trials: usize,
    /// Distinct values per sample.
    pub values_per_sample: usize,
    pub seed: u64,
}

impl Default for DropoutBiasConfig {
    fn default() -> Self {
        DropoutBiasConfig {
            categories: 1000,
            batch_sizes: (1..=10).map(|i| 100 * i).collect(),
            rates: vec![0.0, 0.5],
            trials: 100,
            values_per_sample: 10,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlCell {
    pub batch_size: usize,
    pub rate: f64,
    pub mean_kl: f64,
}

/// Mean KL divergence of the true category distribution from frequency
/// estimates on masked mini-batches.
///
/// Each sample holds `values_per_sample` distinct categories drawn from a
/// fixed random distribution Q. Each sample gets its own mask over the
/// categories with a fraction `rate` set to zero and the rest to
/// `1/(1-rate)`; the estimate is the normalized masked count.
pub fn dropout_bias_experiment(config: &DropoutBiasConfig) -> Result<Vec<KlCell>> {
    let n = config.categories;
    if n == 0 || config.values_per_sample == 0 || config.values_per_sample > n {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {} distinct values from {n} categories",
            config.values_per_sample
        )));
    }
    if config.trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    for &rate in &config.rates {
        check_dropout_rate(rate)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = weights.iter().sum();
    let q: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let sampler = WeightedIndex::new(&q).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut cells = Vec::new();
    let mut estimate = vec![0.0; n];
    let mut values = Vec::with_capacity(config.values_per_sample);
    for &rate in &config.rates {
        let zeros = (rate * n as f64).floor() as usize;
        let keep = 1.0 / (1.0 - rate);
        for &bs in &config.batch_sizes {
            let mut sum_kl = 0.0;
            for _ in 0..config.trials {
                estimate.fill(0.0);
                for _ in 0..bs {
                    values.clear();
                    while values.len() < config.values_per_sample {
                        let v = sampler.sample(&mut rng);
                        if !values.contains(&v) {
                            values.push(v);
                        }
                    }
                    // the mask restricted to this sample's positions: draw
                    // without replacement from `zeros` zero slots among n
                    let (mut zeros_left, mut slots_left) = (zeros, n);
                    for &v in &values {
                        let dropped = rng.gen_range(0..slots_left) < zeros_left;
                        slots_left -= 1;
                        if dropped {
                            zeros_left -= 1;
                        } else {
                            estimate[v] += keep;
                        }
                    }
                }
                let mass: f64 = estimate.iter().sum();
                if mass > 0.0 {
                    estimate.iter_mut().for_each(|e| *e /= mass);
                }
                sum_kl += kl_divergence(&q, &estimate);
            }
            cells.push(KlCell {
                batch_size: bs,
                rate,
                mean_kl: sum_kl / config.trials as f64,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let q = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&q, &q), 0.0);
        assert!(kl_divergence(&q, &[0.5, 0.3, 0.2]) > 0.0);
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]) > 10.0);
    }

    #[test]
    fn large_batches_approach_the_truth() {
        let cfg = DropoutBiasConfig {
            categories: 20,
            batch_sizes: vec![10, 20_000],
            rates: vec![0.0],
            trials: 5,
            values_per_sample: 2,
            seed: 3,
        };
        let cells = dropout_bias_experiment(&cfg).unwrap();
        assert!(cells[1].mean_kl < 1e-3);
        assert!(cells[0].mean_kl > cells[1].mean_kl);
        assert!(cells.iter().all(|c| c.mean_kl >= 0.0));
    }

    #[test]
    fn invalid_rates_and_sizes() {
        let cfg = DropoutBiasConfig {
            rates: vec![1.0],
            ..DropoutBiasConfig::default()
        };
        assert!(dropout_bias_experiment(&cfg).is_err());
        let cfg = DropoutBiasConfig {
            categories: 5,
            ..DropoutBiasConfig::default()
        };
        assert!(dropout_bias_experiment(&cfg).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = DropoutBiasConfig {
            categories: 50,
            batch_sizes: vec![10, 30],
            trials: 4,
            ..DropoutBiasConfig::default()
        };
        assert_eq!(
            dropout_bias_experiment(&cfg).unwrap(),
            dropout_bias_experiment(&cfg).unwrap()
        );
    }
}
