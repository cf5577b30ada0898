use std::collections::BTreeMap;

use rand::RngCore;

use super::{Family, Model};
use crate::compute::ops::{self, dropout_mask};
use crate::compute::{Gradients, Lookup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::extractors::{
    tape_attention, tape_inner_products, tape_kernel_products, tape_micro_net, AttentionVars,
    KernelVar, SubnetVars,
};

/// Forward-pass mode. Dropout is active only in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug)]
pub struct LossOutput {
    /// Mean log loss over the batch.
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Gradients,
}

/// Rows of the crossed table `(a, b) -> a · size_b + b`; set fields take every
/// combination.
fn cross_lookup(a: &Lookup, b: &Lookup, size_b: usize) -> Lookup {
    let mut out = Lookup {
        offsets: vec![0],
        rows: Vec::new(),
    };
    for inst in 0..a.batch_size() {
        for &ra in a.instance(inst) {
            for &rb in b.instance(inst) {
                out.rows.push(ra * size_b + rb);
            }
        }
        out.offsets.push(out.rows.len());
    }
    out
}

/// Anything that maps a batch to logits on a tape and reports the lookup
/// rows it touched. Provides evaluation and the loss gradient.
pub trait Network {
    fn field_sizes(&self) -> &[usize];

    /// Logits `[batch, 1]` recorded on `tape`.
    fn forward(&self, tape: &mut Tape, batch: &Batch, mode: Mode) -> Result<Var>;

    /// Occurrence count of every lookup-table row touched by `batch`.
    fn touch_counts(&self, batch: &Batch) -> Vec<(ParamId, BTreeMap<usize, usize>)>;

    /// Evaluation-mode logits.
    fn predict(&self, params: &ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let logits = self.forward(&mut tape, batch, Mode::Eval)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Mean log loss and its gradient.
    fn loss_and_grad(&self, params: &ParamStore, batch: &Batch, mode: Mode) -> Result<LossOutput> {
        let mut tape = Tape::new(params);
        let root = self.forward(&mut tape, batch, mode)?;
        let logits = tape.value(root).data().to_vec();
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut seed = Vec::with_capacity(logits.len());
        for (&z, &y) in logits.iter().zip(&batch.labels) {
            loss += ops::logloss(z, y);
            seed.push(ops::logloss_grad(z, y) * inv);
        }
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let grads = tape.backward(root, Tensor::from_vec(logits.len(), 1, seed)?)?;
        Ok(LossOutput {
            loss,
            logits,
            grads,
        })
    }
}

pub(crate) fn count_rows(lk: &Lookup) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &r in &lk.rows {
        *m.entry(r).or_insert(0) += 1;
    }
    m
}

impl Network for Model {
    fn field_sizes(&self) -> &[usize] {
        Model::field_sizes(self)
    }

    fn forward(&self, tape: &mut Tape, batch: &Batch, mode: Mode) -> Result<Var> {
        Model::forward(self, tape, batch, mode)
    }

    fn touch_counts(&self, batch: &Batch) -> Vec<(ParamId, BTreeMap<usize, usize>)> {
        Model::touch_counts(self, batch)
    }
}

impl Model {
    /// Logits `[batch, 1]` recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mut mode: Mode) -> Result<Var> {
        let n = self.num_fields();
        if batch.num_fields() != n {
            return Err(Error::Shape(format!(
                "batch has {} fields, model expects {n}",
                batch.num_fields()
            )));
        }
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let layout = self.layout();
        let family = self.family();

        let linear = if family.has_linear() {
            let mut acc = tape.gather(layout.linear[0], &batch.fields[0])?;
            for (id, lk) in layout.linear.iter().zip(&batch.fields).skip(1) {
                let w = tape.gather(*id, lk)?;
                acc = tape.add(acc, w)?;
            }
            let bias = tape.param(layout.bias.expect("linear families have a bias"));
            Some(tape.add_row(acc, bias)?)
        } else {
            None
        };
        let emb: Vec<Var> = layout
            .embed
            .iter()
            .zip(&batch.fields)
            .map(|(&id, lk)| tape.gather(id, lk))
            .collect::<Result<_>>()?;

        let with_linear = |tape: &mut Tape, term: Var| -> Result<Var> {
            tape.add(linear.expect("family has linear terms"), term)
        };

        match family {
            Family::Lr => Ok(linear.expect("lr has linear terms")),
            Family::Fm => {
                let p = tape_inner_products(tape, &emb)?;
                let s = tape.sum_cols(p);
                with_linear(tape, s)
            }
            Family::Ffm => {
                let gathered: Vec<Var> = layout
                    .ffm
                    .iter()
                    .zip(&batch.fields)
                    .map(|(&id, lk)| tape.gather(id, lk))
                    .collect::<Result<_>>()?;
                let k = self.embedding_widths()[0];
                let slot = |i: usize, j: usize| if j < i { j } else { j - 1 };
                let mut terms = Vec::with_capacity(self.pairs().len());
                for &(i, j) in self.pairs().pairs() {
                    let a = tape.slice_cols(gathered[i], slot(i, j) * k, k)?;
                    let b = tape.slice_cols(gathered[j], slot(j, i) * k, k)?;
                    let prod = tape.mul(a, b)?;
                    terms.push(tape.sum_cols(prod));
                }
                let all = tape.concat(&terms)?;
                let s = tape.sum_cols(all);
                with_linear(tape, s)
            }
            Family::Afm => {
                let (w, b, h) = layout.attention.expect("afm has attention");
                let att = AttentionVars {
                    w: tape.param(w),
                    b: tape.param(b),
                    score: tape.param(h),
                    temperature: self.spec().attention.temperature,
                };
                let (_, interaction) = tape_attention(tape, &emb, &att)?;
                with_linear(tape, interaction)
            }
            Family::Kfm => {
                let p = self.kernel_products(tape, &emb)?;
                let s = tape.sum_cols(p);
                with_linear(tape, s)
            }
            Family::Nifm => {
                let p = self.micro_net(tape, &emb, false)?;
                let s = tape.sum_cols(p);
                with_linear(tape, s)
            }
            Family::Fnn => {
                let x = tape.concat(&emb)?;
                self.dnn(tape, x, &mut mode)
            }
            Family::DeepFm => {
                let p = tape_inner_products(tape, &emb)?;
                let s = tape.sum_cols(p);
                let fm = with_linear(tape, s)?;
                let x = tape.concat(&emb)?;
                let deep = self.dnn(tape, x, &mut mode)?;
                tape.add(fm, deep)
            }
            Family::Ipnn | Family::Kpnn => {
                let mut p = if family == Family::Ipnn {
                    tape_inner_products(tape, &emb)?
                } else {
                    self.kernel_products(tape, &emb)?
                };
                if let Some((g, s)) = layout.product_ln {
                    let (g, s) = (tape.param(g), tape.param(s));
                    p = tape.normalize(p, g, s, 1)?;
                }
                let mut parts = emb.clone();
                parts.push(p);
                let x = tape.concat(&parts)?;
                self.dnn(tape, x, &mut mode)
            }
            Family::Pin => {
                let x = self.micro_net(tape, &emb, true)?;
                self.dnn(tape, x, &mut mode)
            }
            Family::Poly2 => {
                let mut terms = Vec::with_capacity(self.pairs().len());
                for (&id, &(i, j)) in layout.poly2.iter().zip(self.pairs().pairs()) {
                    let lk =
                        cross_lookup(&batch.fields[i], &batch.fields[j], self.field_sizes()[j]);
                    terms.push(tape.gather(id, &lk)?);
                }
                let all = tape.concat(&terms)?;
                let s = tape.sum_cols(all);
                with_linear(tape, s)
            }
        }
    }

    pub(crate) fn kernel_products(&self, tape: &mut Tape, emb: &[Var]) -> Result<Var> {
        let mode = self.spec().kernel_mode;
        let kernels: Vec<KernelVar> = if self.layout().kernels.is_empty() {
            vec![KernelVar::Identity; self.pairs().len()]
        } else {
            self.layout()
                .kernels
                .iter()
                .map(|&id| {
                    let v = tape.param(id);
                    match mode {
                        crate::extractors::KernelMode::Vector => KernelVar::Vector(v),
                        _ => KernelVar::Matrix(v),
                    }
                })
                .collect()
        };
        tape_kernel_products(tape, emb, &kernels)
    }

    fn micro_net(&self, tape: &mut Tape, emb: &[Var], with_product: bool) -> Result<Var> {
        let layout = self.layout();
        let subnets: Vec<SubnetVars> = layout
            .subnets
            .iter()
            .map(|s| SubnetVars {
                w1: tape.param(s.w1),
                b1: tape.param(s.b1),
                w2: tape.param(s.w2),
                b2: s.b2.map(|b| tape.param(b)),
            })
            .collect();
        let ln = layout
            .subnet_ln
            .map(|(g, s)| (tape.param(g), tape.param(s)));
        tape_micro_net(
            tape,
            emb,
            &subnets,
            self.spec().subnet_activation,
            ln,
            with_product,
        )
    }

    fn dnn(&self, tape: &mut Tape, mut x: Var, mode: &mut Mode) -> Result<Var> {
        let layout = self.layout();
        let rate = self.spec().dropout;
        for layer in &layout.dnn {
            let (w, b) = (tape.param(layer.w), tape.param(layer.b));
            let h = tape.matmul(x, w)?;
            let mut h = tape.add_row(h, b)?;
            if let Some((g, s)) = layer.ln {
                let (g, s) = (tape.param(g), tape.param(s));
                h = tape.normalize(h, g, s, 1)?;
            }
            h = tape.activation(h, self.spec().activation);
            if let Mode::Train(rng) = mode {
                if rate > 0.0 {
                    let [r, c] = tape.value(h).shape();
                    let mask = Tensor::from_vec(r, c, dropout_mask(r * c, rate, &mut **rng)?)?;
                    h = tape.mask(h, mask)?;
                }
            }
            x = h;
        }
        let (w, b) = layout.dnn_out.expect("classifier has an output layer");
        let (w, b) = (tape.param(w), tape.param(b));
        let out = tape.matmul(x, w)?;
        tape.add_row(out, b)
    }

    pub fn predict(&self, params: &ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        Network::predict(self, params, batch)
    }

    pub fn loss_and_grad(
        &self,
        params: &ParamStore,
        batch: &Batch,
        mode: Mode,
    ) -> Result<LossOutput> {
        Network::loss_and_grad(self, params, batch, mode)
    }

    /// Occurrence count of every lookup-table row touched by `batch`.
    pub fn touch_counts(&self, batch: &Batch) -> Vec<(ParamId, BTreeMap<usize, usize>)> {
        let layout = self.layout();
        let count = count_rows;
        let mut out = Vec::new();
        for tables in [&layout.linear, &layout.embed, &layout.ffm] {
            for (&id, lk) in tables.iter().zip(&batch.fields) {
                out.push((id, count(lk)));
            }
        }
        for (&id, &(i, j)) in layout.poly2.iter().zip(self.pairs().pairs()) {
            let lk = cross_lookup(&batch.fields[i], &batch.fields[j], self.field_sizes()[j]);
            out.push((id, count(&lk)));
        }
        out
    }
}
