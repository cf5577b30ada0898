//! Synthetic data whose label is a noisy thresholded poly-2 score, and the
//! experiment comparing fully connected networks with a poly-2 regressor on
//! it.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::compute::{Activation, EmbeddingSizes, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, Dataset, EncodedInstance};
use crate::error::{Error, Result};
use crate::extractors::PairIndex;
use crate::models::{count_rows, Family, Mode, Model, ModelSpec, Network};
use crate::train::{train, TrainConfig};

/// Noiseless scores drawn to place the threshold.
const CALIBRATION_SAMPLES: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldSizing {
    /// Each field size uniform in `1..=2N/n`.
    Random,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Poly2Spec {
    pub fields: usize,
    /// Target total category count `N`; used by [`FieldSizing::Random`].
    pub categories: usize,
    pub sizing: FieldSizing,
    /// Noise standard deviation as a multiple of the score deviation.
    pub noise: f64,
    /// Fraction of positive labels the threshold aims for.
    pub positive_ratio: f64,
}

impl Default for Poly2Spec {
    fn default() -> Self {
        Poly2Spec {
            fields: 40,
            categories: 400,
            sizing: FieldSizing::Random,
            noise: 0.01,
            positive_ratio: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Poly2Generator {
    field_sizes: Vec<usize>,
    samplers: Vec<WeightedIndex<f64>>,
    linear: Vec<Vec<f64>>,
    /// Per field pair `(i, j)`, `i < j`: weight of `(a, b)` at `a · N_j + b`.
    cross: Vec<Vec<f64>>,
    bias: f64,
    threshold: f64,
    noise_std: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

impl Poly2Generator {
    /// Random category distributions and weights; the threshold is the
    /// `1 - positive_ratio` quantile of noiseless scores.
    pub fn new(spec: &Poly2Spec, seed: u64) -> Result<Self> {
        if spec.fields < 2 {
            return Err(Error::InvalidArgument(
                "poly-2 data needs at least two fields".into(),
            ));
        }
        if !(spec.positive_ratio > 0.0 && spec.positive_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "positive ratio {} outside (0, 1)",
                spec.positive_ratio
            )));
        }
        if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise scale {}",
                spec.noise
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field_sizes: Vec<usize> = match spec.sizing {
            FieldSizing::Fixed(0) => {
                return Err(Error::InvalidArgument("field size must be positive".into()))
            }
            FieldSizing::Fixed(s) => vec![s; spec.fields],
            FieldSizing::Random => {
                let max = 2 * spec.categories / spec.fields;
                if max == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "{} categories cannot cover {} fields",
                        spec.categories, spec.fields
                    )));
                }
                (0..spec.fields).map(|_| rng.gen_range(1..=max)).collect()
            }
        };
        let probs: Vec<Vec<f64>> = field_sizes
            .iter()
            .map(|&s| (0..s).map(|_| rng.sample::<f64, _>(Exp1)).collect())
            .collect();
        let linear = field_sizes.iter().map(|&s| gaussian(&mut rng, s)).collect();
        let cross = PairIndex::new(spec.fields)
            .pairs()
            .iter()
            .copied()
            .map(|(i, j)| gaussian(&mut rng, field_sizes[i] * field_sizes[j]))
            .collect();
        let bias = rng.sample(StandardNormal);
        let mut generator = Self::from_parts(field_sizes, probs, linear, cross, bias, 0.0, 0.0)?;

        let mut scores: Vec<f64> = (0..CALIBRATION_SAMPLES)
            .map(|_| generator.score(&generator.draw(&mut rng)))
            .collect();
        scores.sort_by(f64::total_cmp);
        let at = ((1.0 - spec.positive_ratio) * (scores.len() - 1) as f64).round() as usize;
        generator.threshold = scores[at];
        if scores[0] == scores[scores.len() - 1] {
            return Err(Error::InvalidArgument(
                "poly-2 scores are constant; labels would be one class".into(),
            ));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let std =
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64).sqrt();
        generator.noise_std = spec.noise * std;
        Ok(generator)
    }

    /// A generator with explicit weights. `probs` are unnormalized category
    /// weights per field.
    pub fn from_parts(
        field_sizes: Vec<usize>,
        probs: Vec<Vec<f64>>,
        linear: Vec<Vec<f64>>,
        cross: Vec<Vec<f64>>,
        bias: f64,
        threshold: f64,
        noise_std: f64,
    ) -> Result<Self> {
        let n = field_sizes.len();
        let pairs = PairIndex::new(n);
        if probs.len() != n || linear.len() != n || cross.len() != pairs.len() {
            return Err(Error::Shape(
                "generator parts disagree on the field count".into(),
            ));
        }
        for (f, &s) in field_sizes.iter().enumerate() {
            if probs[f].len() != s || linear[f].len() != s {
                return Err(Error::Shape(format!(
                    "field {f} weights do not have {s} entries"
                )));
            }
        }
        for (c, (i, j)) in cross.iter().zip(pairs.pairs().iter().copied()) {
            if c.len() != field_sizes[i] * field_sizes[j] {
                return Err(Error::Shape(format!(
                    "cross weights for ({i}, {j}) have the wrong size"
                )));
            }
        }
        let samplers = probs
            .iter()
            .map(|p| WeightedIndex::new(p).map_err(|e| Error::InvalidArgument(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Poly2Generator {
            field_sizes,
            samplers,
            linear,
            cross,
            bias,
            threshold,
            noise_std,
        })
    }

    pub fn field_sizes(&self) -> &[usize] {
        &self.field_sizes
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        self.samplers.iter().map(|s| s.sample(rng)).collect()
    }

    /// Noiseless score `b + Σ w_x + Σ v_{x_i, x_j}`.
    pub fn score(&self, x: &[usize]) -> f64 {
        let mut s = self.bias;
        for (w, &xi) in self.linear.iter().zip(x) {
            s += w[xi];
        }
        let pairs = PairIndex::new(x.len());
        for (v, (i, j)) in self.cross.iter().zip(pairs.pairs().iter().copied()) {
            s += v[x[i] * self.field_sizes[j] + x[j]];
        }
        s
    }

    pub fn sample(&self, count: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Dataset::new(self.field_sizes.clone());
        for _ in 0..count {
            let x = self.draw(&mut rng);
            let noise: f64 = rng.sample(StandardNormal);
            let label = u8::from(self.score(&x) + self.noise_std * noise >= self.threshold);
            data.push(&EncodedInstance::single(label, &x))
                .expect("drawn categories lie inside their fields");
        }
        data
    }
}

/// Draw a generator from `seed` and `count` instances from it. Fails when
/// every label comes out the same.
pub fn poly2_generate(
    spec: &Poly2Spec,
    count: usize,
    seed: u64,
) -> Result<(Poly2Generator, Dataset)> {
    let generator = Poly2Generator::new(spec, seed)?;
    let data = generator.sample(count, seed.wrapping_add(1));
    let ratio = data.positive_ratio();
    if count > 0 && (ratio == 0.0 || ratio == 1.0) {
        return Err(Error::InvalidArgument(format!(
            "generated labels are all {}",
            u8::from(ratio == 1.0)
        )));
    }
    Ok((generator, data))
}

/// Fully connected network on the one-hot encoding. The first layer is a
/// per-field table of weight rows summed across fields.
#[derive(Clone, Debug)]
pub struct OneHotDnn {
    field_sizes: Vec<usize>,
    hidden: Vec<usize>,
    activation: Activation,
}

impl OneHotDnn {
    pub fn new(field_sizes: &[usize], hidden: &[usize], activation: Activation) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "hidden layers {hidden:?} must be non-empty and positive"
            )));
        }
        if field_sizes.is_empty() || field_sizes.contains(&0) {
            return Err(Error::EmptyField(
                "one-hot network needs non-empty fields".into(),
            ));
        }
        Ok(OneHotDnn {
            field_sizes: field_sizes.to_vec(),
            hidden: hidden.to_vec(),
            activation,
        })
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Xavier weights over the full one-hot width, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |r: usize, c: usize, fan: usize| {
            let bound = (6.0 / (fan + c) as f64).sqrt();
            let data = (0..r * c).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::from_vec(r, c, data).expect("shape matches data")
        };
        let total: usize = self.field_sizes.iter().sum();
        let h1 = self.hidden[0];
        let mut store = ParamStore::new();
        for (f, &s) in self.field_sizes.iter().enumerate() {
            store.insert(format!("onehot.{f}"), uniform(s, h1, total), true);
        }
        store.insert("onehot.b", Tensor::zeros(1, h1), false);
        for l in 1..self.hidden.len() {
            let (i, o) = (self.hidden[l - 1], self.hidden[l]);
            store.insert(format!("dnn.{l}.w"), uniform(i, o, i), false);
            store.insert(format!("dnn.{l}.b"), Tensor::zeros(1, o), false);
        }
        let last = *self.hidden.last().expect("at least one layer");
        store.insert("dnn.out.w", uniform(last, 1, last), false);
        store.insert("dnn.out.b", Tensor::zeros(1, 1), false);
        store
    }

    fn id(params: &ParamStore, name: &str) -> Result<ParamId> {
        params
            .id(name)
            .ok_or_else(|| Error::Shape(format!("parameters lack `{name}`")))
    }
}

impl Network for OneHotDnn {
    fn field_sizes(&self) -> &[usize] {
        &self.field_sizes
    }

    fn forward(&self, tape: &mut Tape, batch: &Batch, _mode: Mode) -> Result<Var> {
        let params = tape.params();
        let mut h: Option<Var> = None;
        for (f, lk) in batch.fields.iter().enumerate() {
            let rows = tape.gather(Self::id(params, &format!("onehot.{f}"))?, lk)?;
            h = Some(match h {
                Some(acc) => tape.add(acc, rows)?,
                None => rows,
            });
        }
        let h = h.ok_or_else(|| Error::Empty("batch has no fields".into()))?;
        let b = tape.param(Self::id(params, "onehot.b")?);
        let h = tape.add_row(h, b)?;
        let mut x = tape.activation(h, self.activation);
        for l in 1..self.hidden.len() {
            let w = tape.param(Self::id(params, &format!("dnn.{l}.w"))?);
            let b = tape.param(Self::id(params, &format!("dnn.{l}.b"))?);
            let h = tape.matmul(x, w)?;
            let h = tape.add_row(h, b)?;
            x = tape.activation(h, self.activation);
        }
        let w = tape.param(Self::id(params, "dnn.out.w")?);
        let b = tape.param(Self::id(params, "dnn.out.b")?);
        let out = tape.matmul(x, w)?;
        tape.add_row(out, b)
    }

    fn touch_counts(&self, batch: &Batch) -> Vec<(ParamId, BTreeMap<usize, usize>)> {
        // ids are assigned in insertion order by `init_params`
        batch
            .fields
            .iter()
            .enumerate()
            .map(|(f, lk)| (ParamId(f), count_rows(lk)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: Poly2Spec,
    pub train_size: usize,
    pub valid_size: usize,
    /// One network per entry, e.g. `[128, 128, 128]`.
    pub hidden_shapes: Vec<Vec<usize>>,
    pub include_poly2: bool,
    pub activation: Activation,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    /// `(step, validation AUC)` at every scheduled evaluation.
    pub points: Vec<(u64, f64)>,
    pub final_auc: f64,
    pub best_auc: f64,
}

impl Curve {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,auc")?;
        for (s, a) in &self.points {
            writeln!(w, "{s},{a}")?;
        }
        Ok(())
    }
}

fn curve<N: Network>(
    label: String,
    net: &N,
    params: ParamStore,
    train_data: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<Curve> {
    let outcome = train(net, params, train_data, Some(valid), config)?;
    let points: Vec<(u64, f64)> = outcome
        .log
        .iter()
        .filter(|r| r.train_loss.is_some())
        .filter_map(|r| r.eval.map(|e| (r.step, e.auc)))
        .collect();
    let best_auc = outcome.best.map_or(f64::NAN, |b| b.auc);
    Ok(Curve {
        label,
        final_auc: points.last().map_or(best_auc, |p| p.1),
        points,
        best_auc,
    })
}

/// Train every configured network and, optionally, the poly-2 regressor on
/// one generated dataset with a shared optimizer and budget.
pub fn poly2_experiment(config: &ExperimentConfig) -> Result<Vec<Curve>> {
    let generator = Poly2Generator::new(&config.data, config.seed)?;
    let train_data = generator.sample(config.train_size, config.seed.wrapping_add(1));
    let valid = generator.sample(config.valid_size, config.seed.wrapping_add(2));
    for (what, d) in [("training", &train_data), ("validation", &valid)] {
        let r = d.positive_ratio();
        if r == 0.0 || r == 1.0 {
            return Err(Error::InvalidArgument(format!(
                "{what} labels are a single class"
            )));
        }
    }
    let sizes = generator.field_sizes().to_vec();
    let total: usize = sizes.iter().sum();
    let tag = format!("N={total},n={}", sizes.len());
    let mut curves = Vec::new();
    if config.include_poly2 {
        let model = Model::new(
            ModelSpec {
                embedding: EmbeddingSizes::Fixed(1),
                ..ModelSpec::new(Family::Poly2)
            },
            &sizes,
        )?;
        let params = model.init_params(config.seed);
        curves.push(curve(
            format!("{tag},poly2"),
            &model,
            params,
            &train_data,
            &valid,
            &config.train,
        )?);
    }
    for hidden in &config.hidden_shapes {
        let net = OneHotDnn::new(&sizes, hidden, config.activation)?;
        let params = net.init_params(config.seed);
        let shape: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
        curves.push(curve(
            format!("{tag},dnn={}", shape.join("x")),
            &net,
            params,
            &train_data,
            &valid,
            &config.train,
        )?);
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_batch;
    use crate::models::check_gradients;
    use crate::optim::OptimizerSpec;

    fn trivial(threshold: f64) -> Poly2Generator {
        let sizes = vec![3, 2, 4];
        let probs = sizes.iter().map(|&s| vec![1.0; s]).collect();
        let linear = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let cross = PairIndex::new(3)
            .pairs()
            .iter()
            .copied()
            .map(|(i, j)| vec![0.0; sizes[i] * sizes[j]])
            .collect();
        Poly2Generator::from_parts(sizes, probs, linear, cross, 0.0, threshold, 0.0).unwrap()
    }

    #[test]
    fn zero_weights_at_zero_threshold_label_everything_positive() {
        assert_eq!(trivial(0.0).sample(500, 1).positive_ratio(), 1.0);
    }

    #[test]
    fn threshold_above_every_score_labels_everything_negative() {
        assert_eq!(trivial(1e-9).sample(500, 1).positive_ratio(), 0.0);
        let g = Poly2Generator::new(&Poly2Spec::default(), 3).unwrap();
        let data = g.sample(200, 4);
        let max = (0..data.len())
            .map(|i| {
                g.score(
                    &data
                        .instance(i)
                        .values
                        .iter()
                        .map(|v| v[0])
                        .collect::<Vec<_>>(),
                )
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let above = Poly2Generator {
            threshold: max + 1.0,
            noise_std: 0.0,
            ..g
        };
        assert_eq!(above.sample(200, 4).positive_ratio(), 0.0);
    }

    #[test]
    fn score_matches_hand_computation() {
        let g = Poly2Generator::from_parts(
            vec![2, 3],
            vec![vec![1.0; 2], vec![1.0; 3]],
            vec![vec![0.5, -1.0], vec![2.0, 0.0, 1.0]],
            vec![vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]],
            -0.25,
            0.0,
            0.0,
        )
        .unwrap();
        // b + w0[1] + w1[2] + v[1·3 + 2]
        assert!((g.score(&[1, 2]) - (-0.25 - 1.0 + 1.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn auto_threshold_balances_labels() {
        let spec = Poly2Spec::default();
        let (g, data) = poly2_generate(&spec, 100_000, 7).unwrap();
        assert_eq!(g.field_sizes().len(), 40);
        assert!(g.field_sizes().iter().all(|&s| (1..=20).contains(&s)));
        assert!(
            (data.positive_ratio() - 0.5).abs() <= 0.02,
            "{}",
            data.positive_ratio()
        );
        let skewed = Poly2Spec {
            positive_ratio: 0.1,
            ..spec
        };
        let (_, data) = poly2_generate(&skewed, 20_000, 7).unwrap();
        assert!((data.positive_ratio() - 0.1).abs() <= 0.02);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = Poly2Spec {
            fields: 5,
            categories: 30,
            ..Poly2Spec::default()
        };
        let a = poly2_generate(&spec, 300, 11).unwrap().1;
        let b = poly2_generate(&spec, 300, 11).unwrap().1;
        assert_eq!(a, b);
        assert_ne!(a, poly2_generate(&spec, 300, 12).unwrap().1);
    }

    #[test]
    fn one_hot_dnn_gradients() {
        let sizes = [3, 4, 2];
        let net = OneHotDnn::new(&sizes, &[5, 3], Activation::Tanh).unwrap();
        let params = net.init_params(2);
        let batch = random_batch(&sizes, 8, &[1], 5);
        let r = check_gradients(&net, &params, &batch, 1e-4, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        let counts = net.touch_counts(&batch);
        assert_eq!(counts.len(), 3);
        assert_eq!(params.param(counts[1].0).name, "onehot.1");
    }

    #[test]
    fn small_experiment_learns() {
        let config = ExperimentConfig {
            data: Poly2Spec {
                fields: 4,
                categories: 12,
                sizing: FieldSizing::Fixed(3),
                ..Poly2Spec::default()
            },
            train_size: 4000,
            valid_size: 1000,
            hidden_shapes: vec![vec![16]],
            include_poly2: true,
            activation: Activation::Relu,
            train: TrainConfig {
                epochs: 3,
                batch_size: 64,
                optimizer: OptimizerSpec {
                    lr: 1e-2,
                    ..OptimizerSpec::default()
                },
                ..TrainConfig::default()
            },
            seed: 3,
        };
        let curves = poly2_experiment(&config).unwrap();
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0].label, "N=12,n=4,poly2");
        assert_eq!(curves[1].label, "N=12,n=4,dnn=16");
        for c in &curves {
            assert_eq!(c.points.len(), 3);
            assert!(c.best_auc > 0.8, "{c:?}");
        }
    }
}
