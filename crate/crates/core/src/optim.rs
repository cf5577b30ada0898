//! Optimizers, regularizers and closed-form Adam diagnostics.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::compute::{Grad, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Read and update only the lookup-table rows a batch touched.
    pub sparse_update: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPSILON,
            sparse_update: true,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            return bad(format!("epsilon {} must be positive", self.eps));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Step of each row's last update; lazily-updated tables only.
    last: Vec<u64>,
}

/// SGD or Adam over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    state: Vec<Moments>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &ParamStore) -> Result<Self> {
        spec.validate()?;
        let state = params
            .iter()
            .map(|(_, p)| {
                let len = if spec.kind == OptimizerKind::Adam {
                    p.value.len()
                } else {
                    0
                };
                Moments {
                    m: vec![0.0; len],
                    v: vec![0.0; len],
                    last: vec![0; if p.sparse { p.value.rows() } else { 0 }],
                }
            })
            .collect();
        Ok(Optimizer {
            spec,
            step: 0,
            state,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// Completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient count as having a zero
    /// gradient; lazily-updated tables skip them entirely.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let finite = match g {
                Grad::Dense(t) => t.is_finite(),
                Grad::Rows(rows) => rows.values().all(|r| r.iter().all(|v| v.is_finite())),
            };
            if !finite {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}`",
                    params.param(id).name
                )));
            }
        }
        self.step += 1;
        let t = self.step;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let lazy = self.spec.sparse_update && params.param(id).sparse;
            let value = params.get_mut(id);
            let cols = value.cols();
            let state = &mut self.state[id.index()];
            match (grads.get(id), lazy) {
                (Some(Grad::Rows(rows)), true) => {
                    for (&r, g) in rows {
                        let range = r * cols..(r + 1) * cols;
                        let skipped = t - state.last[r] - 1;
                        state.last[r] = t;
                        update(&self.spec, t, value, state, range, g, skipped);
                    }
                }
                (None, true) => {}
                (grad, _) => {
                    let dense = densify(grad, value.rows(), cols);
                    let len = value.len();
                    update(&self.spec, t, value, state, 0..len, &dense, 0);
                }
            }
        }
        Ok(())
    }

    /// First and second moments of one parameter as stored (lazily-updated
    /// rows are not decayed until their next touch).
    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let s = &self.state[id.index()];
        (&s.m, &s.v)
    }
}

fn update(
    s: &OptimizerSpec,
    step: u64,
    value: &mut Tensor,
    state: &mut Moments,
    range: std::ops::Range<usize>,
    g: &[f64],
    skipped: u64,
) {
    let data = &mut value.data_mut()[range.clone()];
    match s.kind {
        OptimizerKind::Sgd => {
            for (w, gi) in data.iter_mut().zip(g) {
                *w -= s.lr * gi;
            }
        }
        OptimizerKind::Adam => {
            let t = i32::try_from(step).unwrap_or(i32::MAX);
            let c1 = 1.0 - s.beta1.powi(t);
            let c2 = 1.0 - s.beta2.powi(t);
            let (d1, d2) = if skipped > 0 {
                (s.beta1.powf(skipped as f64), s.beta2.powf(skipped as f64))
            } else {
                (1.0, 1.0)
            };
            let m = &mut state.m[range.clone()];
            let v = &mut state.v[range];
            for (((w, gi), mi), vi) in data.iter_mut().zip(g).zip(m).zip(v) {
                *mi = s.beta1 * (*mi * d1) + (1.0 - s.beta1) * gi;
                *vi = s.beta2 * (*vi * d2) + (1.0 - s.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= s.lr * mhat / (vhat.sqrt() + s.eps);
            }
        }
    }
}

fn densify(grad: Option<&Grad>, rows: usize, cols: usize) -> Vec<f64> {
    match grad {
        Some(Grad::Dense(t)) => t.data().to_vec(),
        Some(Grad::Rows(map)) => {
            let mut out = vec![0.0; rows * cols];
            for (&r, g) in map {
                out[r * cols..(r + 1) * cols].copy_from_slice(g);
            }
            out
        }
        None => vec![0.0; rows * cols],
    }
}

/// Sparse L2 contribution `count · λ · row` for every touched row.
pub fn sparse_l2_gradient(
    table: &Tensor,
    counts: &BTreeMap<usize, usize>,
    lambda: f64,
) -> BTreeMap<usize, Vec<f64>> {
    if lambda == 0.0 {
        return BTreeMap::new();
    }
    counts
        .iter()
        .map(|(&r, &c)| {
            (
                r,
                table.row(r).iter().map(|v| c as f64 * lambda * v).collect(),
            )
        })
        .collect()
}

/// Regularization added to the data gradient before a step.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Regularizer {
    /// On touched lookup-table rows, per occurrence.
    pub sparse_l2: f64,
    /// On the attention projection and score weights.
    pub attention_l2: f64,
    /// On every dense parameter.
    pub global_l2: f64,
}

impl Regularizer {
    /// `touched` lists the row occurrence counts of each lookup table.
    pub fn apply(
        &self,
        params: &ParamStore,
        touched: &[(ParamId, BTreeMap<usize, usize>)],
        grads: &mut Gradients,
    ) {
        if self.sparse_l2 != 0.0 {
            for (id, counts) in touched {
                let extra = sparse_l2_gradient(params.get(*id), counts, self.sparse_l2);
                if extra.is_empty() {
                    continue;
                }
                if grads.get(*id).is_none() {
                    grads.set(*id, Grad::Rows(BTreeMap::new()));
                }
                if let Some(Grad::Rows(rows)) = grads.get_mut(*id) {
                    for (r, e) in extra {
                        let row = rows.entry(r).or_insert_with(|| vec![0.0; e.len()]);
                        for (g, x) in row.iter_mut().zip(e) {
                            *g += x;
                        }
                    }
                }
            }
        }
        for (id, p) in params.iter() {
            if p.sparse {
                continue;
            }
            let mut lambda = self.global_l2;
            if p.name == "attn.w" || p.name == "attn.h" {
                lambda += self.attention_l2;
            }
            if lambda == 0.0 {
                continue;
            }
            if grads.get(id).is_none() {
                grads.set(
                    id,
                    Grad::Dense(Tensor::zeros(p.value.rows(), p.value.cols())),
                );
            }
            if let Some(Grad::Dense(g)) = grads.get_mut(id) {
                for (gi, w) in g.data_mut().iter_mut().zip(p.value.data()) {
                    *gi += lambda * w;
                }
            }
        }
    }
}

/// Smallest gradient magnitude whose Adam estimate is not dominated by ε at
/// step `t`: `ε / sqrt((1−β2)/(1−β2^t))`.
pub fn gstar(eps: f64, beta2: f64, t: u64) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument("step t must be at least 1".into()));
    }
    let t = i32::try_from(t).map_or(f64::INFINITY, f64::from);
    Ok(eps / ((1.0 - beta2) / (1.0 - beta2.powf(t))).sqrt())
}

/// Adam estimate `T` steps after a single gradient spike `g_t` at step `t`,
/// with zero gradients in between.
pub fn long_tail_gradient(
    g_t: f64,
    t: u64,
    window: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument("step t must be at least 1".into()));
    }
    if !(g_t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spike g_t={g_t} must be positive"
        )));
    }
    let (tt, w) = ((t + window) as f64, window as f64);
    let num = (1.0 - beta1) * beta1.powf(w) / (1.0 - beta1.powf(tt));
    let den = ((1.0 - beta2) * beta2.powf(w) / (1.0 - beta2.powf(tt))).sqrt() + eps / g_t;
    Ok(num / den)
}

/// Expected logit gradient `α (E[σ]/α − 1) = E[σ] − α` under positive ratio α.
pub fn unbalance_gradient_expectation(alpha: f64, mean_sigma: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "positive ratio {alpha} outside (0, 1)"
        )));
    }
    Ok(alpha * (mean_sigma / alpha - 1.0))
}
