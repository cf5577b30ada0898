//! Single-instance numerical primitives.
//!
//! The batched versions inside [`super::tape`] are written independently of
//! these; tests hold the two paths against each other.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;

/// Added to the variance under the square root in every normalization.
pub const LN_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
    Elu,
    Selu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Selu => selu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x` given the forward output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    y + SELU_LAMBDA * SELU_ALPHA
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
            Activation::Selu => "selu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" | "none" => Activation::Identity,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "elu" => Activation::Elu,
            "selu" => Activation::Selu,
            "sigmoid" => Activation::Sigmoid,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown activation `{other}`"
                )))
            }
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * (SELU_ALPHA * x.exp() - SELU_ALPHA)
    }
}

/// Sigmoid cross-entropy of a logit, in the overflow-free fused form.
#[inline]
pub fn logloss(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// d logloss / d logit.
#[inline]
pub fn logloss_grad(logit: f64, label: f64) -> f64 {
    sigmoid(logit) - label
}

/// `activation(Wᵀx + b)` for one instance; `weights` is `in × out` row-major.
pub fn dense(
    input: &[f64],
    weights: &[Vec<f64>],
    bias: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    if weights.len() != input.len() {
        return Err(Error::Shape(format!(
            "dense: {} weight rows for input width {}",
            weights.len(),
            input.len()
        )));
    }
    let out_width = bias.len();
    if let Some(row) = weights.iter().find(|r| r.len() != out_width) {
        return Err(Error::Shape(format!(
            "dense: weight row of width {} for {} outputs",
            row.len(),
            out_width
        )));
    }
    let mut out = bias.to_vec();
    for (x, row) in input.iter().zip(weights) {
        for (o, w) in out.iter_mut().zip(row) {
            *o += x * w;
        }
    }
    for o in &mut out {
        *o = activation.apply(*o);
    }
    Ok(out)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, (var + LN_EPSILON).sqrt())
}

/// Layer normalization with population standard deviation.
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("layer_norm on empty input".into()));
    }
    if gain.len() != x.len() || shift.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm: width {} with gain {} / shift {}",
            x.len(),
            gain.len(),
            shift.len()
        )));
    }
    let (mean, std) = mean_std(x.iter().copied());
    Ok(x.iter()
        .zip(gain.iter().zip(shift))
        .map(|(v, (g, s))| (v - mean) / std * g + s)
        .collect())
}

/// Layer normalization whose statistics pool over every entry of an
/// `m × d2` block of sub-network outputs; one gain/shift of length `d2` is
/// shared by all sub-networks.
pub fn fused_layer_norm(block: &[Vec<f64>], gain: &[f64], shift: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d2 = block.first().map_or(0, Vec::len);
    if block.is_empty() || d2 == 0 {
        return Err(Error::InvalidArgument(
            "fused_layer_norm on empty block".into(),
        ));
    }
    if block.iter().any(|r| r.len() != d2) || gain.len() != d2 || shift.len() != d2 {
        return Err(Error::Shape(
            "fused_layer_norm: ragged block or gain/shift width".into(),
        ));
    }
    let (mean, std) = mean_std(block.iter().flatten().copied());
    Ok(block
        .iter()
        .map(|row| {
            row.iter()
                .zip(gain.iter().zip(shift))
                .map(|(v, (g, s))| (v - mean) / std * g + s)
                .collect()
        })
        .collect())
}

/// Inverted-dropout mask: each unit is 0 with probability `rate`, otherwise
/// `1/(1-rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_dropout_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

pub fn dropout(input: &[f64], rate: f64, seed: u64, training: bool) -> Result<Vec<f64>> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(input.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(input.len(), rate, &mut rng)?;
    Ok(input.iter().zip(mask).map(|(x, m)| x * m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn selu_values() {
        assert_eq!(selu(0.0), 0.0);
        assert_eq!(selu(1.0), 1.0507009873554805);
        assert!(close(selu(-800.0), -1.7580993408473766, 1e-15));
        assert!(close(-SELU_LAMBDA * SELU_ALPHA, -1.7580993408473766, 1e-15));
    }

    #[test]
    fn logloss_values() {
        assert!(close(logloss(0.0, 1.0), std::f64::consts::LN_2, 1e-15));
        let l = logloss(40.0, 1.0);
        assert!((0.0..1e-15).contains(&l));
        assert!(close(logloss(2.0, 0.0), (1.0 + 2f64.exp()).ln(), 1e-14));
        assert!(close(logloss(2.0, 0.0), 2.126928011042972, 1e-12));
        assert!(logloss(-800.0, 1.0).is_finite());
    }

    #[test]
    fn logloss_gradient_is_sigmoid_minus_label() {
        let h = 1e-6;
        for &z in &[-5.0, 0.0, 5.0] {
            for &y in &[0.0, 1.0] {
                let fd = (logloss(z + h, y) - logloss(z - h, y)) / (2.0 * h);
                let analytic = logloss_grad(z, y);
                assert!(close(fd, analytic, 1e-9), "z={z} y={y}: {fd} vs {analytic}");
                assert_eq!(analytic, sigmoid(z) - y);
            }
        }
    }

    #[test]
    fn sigmoid_is_in_open_unit_interval() {
        for &z in &[-30.0, -1.0, 0.0, 1.0, 30.0] {
            let s = sigmoid(z);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn dense_examples() {
        let zero_w = vec![vec![0.0; 2]; 3];
        assert_eq!(
            dense(&[1.0, 2.0, 3.0], &zero_w, &[0.0, 0.0], Activation::Relu).unwrap(),
            vec![0.0, 0.0]
        );
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(
            dense(&[0.3, -0.7], &eye, &[0.0, 0.0], Activation::Identity).unwrap(),
            vec![0.3, -0.7]
        );
        // [1,-1]·[1,1] = 0 before relu
        assert_eq!(
            dense(
                &[1.0, -1.0],
                &[vec![1.0], vec![1.0]],
                &[0.0],
                Activation::Relu
            )
            .unwrap(),
            vec![0.0]
        );
        assert!(dense(&[1.0], &eye, &[0.0, 0.0], Activation::Relu).is_err());
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in [
            Activation::Identity,
            Activation::Relu,
            Activation::Tanh,
            Activation::Elu,
            Activation::Selu,
            Activation::Sigmoid,
        ] {
            for &x in &[-1.3, -0.2, 0.4, 2.0] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let d = act.derivative(x, act.apply(x));
                assert!(close(fd, d, 1e-7), "{act} at {x}: {fd} vs {d}");
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(close(y[0], -1.0, 1e-8) && close(y[1], 1.0, 1e-8));
        assert_eq!(
            layer_norm(&[2.0, 2.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
        let y = layer_norm(&[0.0, 2.0, 4.0], &[2.0; 3], &[1.0; 3]).unwrap();
        let std = (8.0f64 / 3.0).sqrt();
        let expected = [1.0 - 4.0 / std, 1.0, 1.0 + 4.0 / std];
        for (a, b) in y.iter().zip(expected) {
            assert!(close(*a, b, 1e-8));
        }
        assert!(close(y[0], -1.4495, 1e-4) && close(y[2], 3.4495, 1e-4));
        assert!(layer_norm(&[], &[], &[]).is_err());
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = [0.3, -2.0, 5.5, 1.25, 0.0];
        let y = layer_norm(&x, &[1.0; 5], &[0.0; 5]).unwrap();
        let mean = y.iter().sum::<f64>() / 5.0;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fused_layer_norm_examples() {
        let out =
            fused_layer_norm(&[vec![1.0, 3.0], vec![5.0, 7.0]], &[1.0; 2], &[0.0; 2]).unwrap();
        let s5 = 5f64.sqrt();
        let expected = [[-3.0 / s5, -1.0 / s5], [1.0 / s5, 3.0 / s5]];
        for (row, exp) in out.iter().zip(expected) {
            for (a, b) in row.iter().zip(exp) {
                assert!(close(*a, b, 1e-8));
            }
        }
        assert!(close(out[0][0], -1.3416, 1e-4) && close(out[1][0], 0.4472, 1e-4));

        let flat = fused_layer_norm(&[vec![4.0; 3], vec![4.0; 3]], &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(flat.iter().flatten().all(|&v| v == 0.0));

        let x = vec![0.5, -1.0, 2.25, 3.0];
        let gain = [1.5, 0.5, -1.0, 2.0];
        let shift = [0.1, 0.2, 0.3, 0.4];
        let fused = fused_layer_norm(std::slice::from_ref(&x), &gain, &shift).unwrap();
        let plain = layer_norm(&x, &gain, &shift).unwrap();
        for (a, b) in fused[0].iter().zip(&plain) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn dropout_modes() {
        let x = vec![1.0, 2.0, 3.0];
        assert_eq!(dropout(&x, 0.0, 1, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, 1, false).unwrap(), x);
        assert!(dropout(&x, 1.0, 1, true).is_err());
        assert!(dropout(&x, -0.1, 1, false).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let ones = vec![1.0; 100_000];
        let out = dropout(&ones, 0.5, 42, true).unwrap();
        let zeros = out.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.5).abs() < 0.02, "zero fraction {zeros}");
        let mean = out.iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert_eq!(out, dropout(&ones, 0.5, 42, true).unwrap());
    }
}
