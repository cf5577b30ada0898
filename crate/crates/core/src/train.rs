//! Mini-batch training with seeded shuffling, per-batch logging and
//! best-checkpoint selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compute::{ops, ParamStore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::models::{Mode, Network};
use crate::optim::{Optimizer, OptimizerSpec, Regularizer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates at the end of each epoch.
    pub eval_every: usize,
    pub optimizer: OptimizerSpec,
    pub regularizer: Regularizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 256,
            seed: 1,
            eval_every: 0,
            optimizer: OptimizerSpec::default(),
            regularizer: Regularizer::default(),
        }
    }
}

/// One line of the training log. Batch rows carry the logit gradient and
/// loss; evaluation columns are filled on scheduled steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub mean_logit_grad: Option<f64>,
    pub train_loss: Option<f64>,
    pub eval: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best evaluation AUC, or the final ones when no
    /// evaluation set is given.
    pub params: ParamStore,
    pub log: Vec<LogRow>,
    pub best_step: u64,
    pub best: Option<MetricsReport>,
}

pub const LOG_HEADER: &str = "step,mean_logit_grad,train_loss,eval_auc,eval_logloss";

pub fn write_log<W: Write>(mut w: W, log: &[LogRow]) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            row.step,
            opt(row.mean_logit_grad),
            opt(row.train_loss),
            opt(row.eval.map(|e| e.auc)),
            opt(row.eval.map(|e| e.logloss)),
        )?;
    }
    Ok(())
}

pub fn train<N: Network>(
    model: &N,
    params: ParamStore,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if config.epochs > 0 && train_data.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    if train_data.field_sizes() != model.field_sizes() {
        return Err(Error::Shape(
            "training data and model disagree on field sizes".into(),
        ));
    }
    if let Some(e) = eval_data {
        if e.field_sizes() != model.field_sizes() {
            return Err(Error::Shape(
                "evaluation data and model disagree on field sizes".into(),
            ));
        }
    }

    let mut params = params;
    let mut optimizer = Optimizer::new(config.optimizer, &params)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval_batch = config.batch_size.max(1024);

    let mut log = Vec::new();
    let mut best: Option<(MetricsReport, u64, ParamStore)> = None;
    let mut step = 0u64;
    let mut last_eval_step = None;

    let consider = |params: &ParamStore,
                    step: u64,
                    best: &mut Option<(MetricsReport, u64, ParamStore)>|
     -> Result<Option<MetricsReport>> {
        let Some(data) = eval_data else {
            return Ok(None);
        };
        let report = evaluate(model, params, data, eval_batch)?;
        if best.as_ref().is_none_or(|(b, _, _)| report.auc > b.auc) {
            *best = Some((report, step, params.clone()));
        }
        Ok(Some(report))
    };

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let batches = order.len().div_ceil(config.batch_size);
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            step += 1;
            let batch = train_data.batch(rows);
            let out = model
                .loss_and_grad(&params, &batch, Mode::Train(&mut dropout_rng))
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: out.loss,
                });
            }
            let mean_logit_grad = out
                .logits
                .iter()
                .zip(&batch.labels)
                .map(|(&z, &y)| ops::logloss_grad(z, y).abs())
                .sum::<f64>()
                / batch.len() as f64;
            if mean_logit_grad > 1.0 {
                return Err(Error::NonFinite(format!(
                    "mean logit gradient {mean_logit_grad} exceeds 1 at step {step}"
                )));
            }
            let mut grads = out.grads;
            config
                .regularizer
                .apply(&params, &model.touch_counts(&batch), &mut grads);
            optimizer.step(&mut params, &grads).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    step,
                    loss: out.loss,
                },
                other => other,
            })?;

            let scheduled = if config.eval_every > 0 {
                step.is_multiple_of(config.eval_every as u64)
            } else {
                b + 1 == batches
            };
            let eval = if scheduled {
                last_eval_step = Some(step);
                consider(&params, step, &mut best)?
            } else {
                None
            };
            log.push(LogRow {
                step,
                mean_logit_grad: Some(mean_logit_grad),
                train_loss: Some(out.loss),
                eval,
            });
        }
    }
    if last_eval_step != Some(step) {
        consider(&params, step, &mut best)?;
    }

    Ok(match best {
        Some((report, best_step, best_params)) => {
            log.push(LogRow {
                step: best_step,
                mean_logit_grad: None,
                train_loss: None,
                eval: Some(report),
            });
            TrainOutcome {
                params: best_params,
                log,
                best_step,
                best: Some(report),
            }
        }
        None => TrainOutcome {
            params,
            log,
            best_step: step,
            best: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::EmbeddingSizes;
    use crate::data::EncodedInstance;
    use crate::models::{Family, Model, ModelSpec};
    use crate::optim::OptimizerKind;

    fn separable() -> Dataset {
        let mut d = Dataset::new(vec![2, 2]);
        for i in 0..64 {
            let a = i % 2;
            let b = (i / 2) % 2;
            d.push(&EncodedInstance::single(u8::from(a == 1), &[a, b]))
                .unwrap();
        }
        d
    }

    #[test]
    fn zero_epochs_keep_initial_params() {
        let data = separable();
        let model = Model::new(ModelSpec::new(Family::Lr), &[2, 2]).unwrap();
        let p = model.init_params(3);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&model, p.clone(), &data, None, &cfg).unwrap();
        for ((_, a), (_, b)) in out.params.iter().zip(p.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert!(out.log.is_empty());
    }

    #[test]
    fn lr_separates_toy_data() {
        let data = separable();
        let model = Model::new(ModelSpec::new(Family::Lr), &[2, 2]).unwrap();
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 8,
            eval_every: 10,
            optimizer: OptimizerSpec {
                lr: 0.05,
                ..OptimizerSpec::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&model, model.init_params(1), &data, Some(&data), &cfg).unwrap();
        let reached = out
            .log
            .iter()
            .find(|r| r.eval.is_some_and(|e| e.auc == 1.0))
            .expect("reaches AUC 1");
        assert!(reached.step <= 200);
        assert!(out
            .log
            .iter()
            .all(|r| r.mean_logit_grad.is_none_or(|g| g <= 1.0)));
        let last = out.log.last().unwrap();
        assert!(last.train_loss.is_none());
        assert_eq!(last.eval, out.best);
        assert_eq!(
            evaluate(&model, &out.params, &data, 7).unwrap(),
            out.best.unwrap()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable();
        let spec = ModelSpec {
            embedding: EmbeddingSizes::Fixed(3),
            hidden: vec![4],
            dropout: 0.3,
            ..ModelSpec::new(Family::DeepFm)
        };
        let model = Model::new(spec, &[2, 2]).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            eval_every: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let out = train(&model, model.init_params(2), &data, Some(&data), &cfg).unwrap();
            let mut log = Vec::new();
            write_log(&mut log, &out.log).unwrap();
            let mut ckpt = Vec::new();
            model
                .save_checkpoint(&mut ckpt, &out.params, Some(cfg.seed))
                .unwrap();
            (log, ckpt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_reports_the_step() {
        let data = separable();
        let model = Model::new(ModelSpec::new(Family::Lr), &[2, 2]).unwrap();
        let mut p = model.init_params(1);
        p.by_name_mut("bias").unwrap().data_mut()[0] = f64::INFINITY;
        let cfg = TrainConfig {
            optimizer: OptimizerSpec {
                kind: OptimizerKind::Sgd,
                ..OptimizerSpec::default()
            },
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&model, p, &data, None, &cfg),
            Err(Error::Diverged { step: 1, .. })
        ));
    }

    #[test]
    fn log_format() {
        let mut buf = Vec::new();
        let rows = [LogRow {
            step: 3,
            mean_logit_grad: Some(0.5),
            train_loss: Some(0.25),
            eval: None,
        }];
        write_log(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{LOG_HEADER}\n3,0.5,0.25,,\n")
        );
    }
}
