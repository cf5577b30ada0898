//! Batch-level reverse-mode differentiation.
//!
//! A [`Tape`] records tensor operations on `[batch, width]` matrices in
//! evaluation order; [`Tape::backward`] walks it in reverse and returns
//! gradients for every parameter that took part. Embedding lookups produce
//! row-sparse gradients so an optimizer can tell which rows were touched.

use std::collections::BTreeMap;

use super::ops::{Activation, LN_EPSILON};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-instance row lists for one field of a batch (CSR layout).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lookup {
    pub offsets: Vec<usize>,
    pub rows: Vec<usize>,
}

impl Lookup {
    pub fn batch_size(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn instance(&self, b: usize) -> &[usize] {
        &self.rows[self.offsets[b]..self.offsets[b + 1]]
    }

    /// One row per instance.
    pub fn single(rows: Vec<usize>) -> Self {
        Lookup {
            offsets: (0..=rows.len()).collect(),
            rows,
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Input,
    Param,
    Gather {
        table: ParamId,
        lookup: Lookup,
    },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Norm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Mask(Var, Tensor),
    SumCols(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
        temperature: f64,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// Gradient of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Grad {
    Dense(Tensor),
    /// Touched rows only, keyed by row index.
    Rows(BTreeMap<usize, Vec<f64>>),
}

#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Grad>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Grad> {
        self.grads[id.index()].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Grad> {
        self.grads[id.index()].as_mut()
    }

    pub fn set(&mut self, id: ParamId, grad: Grad) {
        self.grads[id.index()] = Some(grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Grad)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Gradient value at `(row, col)` of a parameter, zero if untouched.
    pub fn value_at(&self, id: ParamId, row: usize, col: usize, cols: usize) -> f64 {
        match self.get(id) {
            None => 0.0,
            Some(Grad::Dense(t)) => t.data()[row * cols + col],
            Some(Grad::Rows(rows)) => rows.get(&row).map_or(0.0, |r| r[col]),
        }
    }

    fn dense_mut(&mut self, id: ParamId, shape: [usize; 2]) -> &mut Tensor {
        let slot = &mut self.grads[id.index()];
        if slot.is_none() {
            *slot = Some(Grad::Dense(Tensor::zeros(shape[0], shape[1])));
        }
        match slot {
            Some(Grad::Dense(t)) => t,
            _ => panic!(
                "parameter {} used both densely and as a lookup table",
                id.index()
            ),
        }
    }

    fn rows_mut(&mut self, id: ParamId) -> &mut BTreeMap<usize, Vec<f64>> {
        let slot = &mut self.grads[id.index()];
        if slot.is_none() {
            *slot = Some(Grad::Rows(BTreeMap::new()));
        }
        match slot {
            Some(Grad::Rows(r)) => r,
            _ => panic!(
                "parameter {} used both densely and as a lookup table",
                id.index()
            ),
        }
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Shape(format!("{op}: {}x{} vs {}x{}", a[0], a[1], b[0], b[1]))
}

fn col_sum(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Per instance, the mean of the looked-up rows of `table`.
    pub fn gather(&mut self, table: ParamId, lookup: &Lookup) -> Result<Var> {
        let t = self.params.get(table);
        let width = t.cols();
        let batch = lookup.batch_size();
        let mut out = Tensor::zeros(batch, width);
        for b in 0..batch {
            let rows = lookup.instance(b);
            if rows.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "instance {b} has no rows for table `{}`",
                    self.params.param(table).name
                )));
            }
            let dst = out.row_mut(b);
            for &r in rows {
                if r >= t.rows() {
                    return Err(Error::IndexOutOfRange {
                        field: table.index(),
                        index: r,
                        size: t.rows(),
                    });
                }
                for (d, s) in dst.iter_mut().zip(t.row(r)) {
                    *d += s;
                }
            }
            if rows.len() > 1 {
                let inv = 1.0 / rows.len() as f64;
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                lookup: lookup.clone(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + r` with `r` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(shape_err("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for b in 0..out.rows() {
            for (o, v) in out.row_mut(b).iter_mut().zip(rv.data()) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddRow(x, r)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x ⊙ r` with `r` of shape `[1, cols]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(shape_err("mul_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for b in 0..out.rows() {
            for (o, v) in out.row_mut(b).iter_mut().zip(rv.data()) {
                *o *= v;
            }
        }
        Ok(self.push(out, Op::MulRow(x, r)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| act.apply(v)).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        self.push(out, Op::Act(x, act))
    }

    /// Per-row normalization over all columns of `x`, which is viewed as
    /// `groups` consecutive blocks of width `gain.cols()`; the gain/shift
    /// vector is shared by every block. `groups == 1` is plain layer norm,
    /// `groups == m` is the pooled normalization over `m` sub-networks.
    pub fn normalize(&mut self, x: Var, gain: Var, shift: Var, groups: usize) -> Result<Var> {
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        let width = gv.cols();
        if groups == 0 || gv.rows() != 1 || sv.shape() != gv.shape() || xv.cols() != groups * width
        {
            return Err(Error::Shape(format!(
                "normalize: input {:?}, gain {:?}, shift {:?}, groups {groups}",
                xv.shape(),
                gv.shape(),
                sv.shape()
            )));
        }
        let d = xv.cols() as f64;
        let mut xhat = Tensor::zeros(xv.rows(), xv.cols());
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for b in 0..xv.rows() {
            let row = xv.row(b);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPSILON).sqrt();
            inv_std.push(is);
            let hrow = xhat.row_mut(b);
            for (h, v) in hrow.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let orow = out.row_mut(b);
            for (c, (o, h)) in orow.iter_mut().zip(xhat.row(b)).enumerate() {
                let u = c % width;
                *o = h * gv.data()[u] + sv.data()[u];
            }
        }
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(shape_err("mask", xv.shape(), mask.shape()));
        }
        let data = xv
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a * m)
            .collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data)?;
        Ok(self.push(out, Op::Mask(x, mask)))
    }

    /// Row sums, `[batch, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|b| xv.row(b).iter().sum()).collect();
        let out = Tensor::from_vec(xv.rows(), 1, data).expect("shape");
        self.push(out, Op::SumCols(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::Shape(format!("concat: {} rows vs {rows}", v.rows())));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for b in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(b);
                out.row_mut(b)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Shape(format!(
                "slice {start}..{} of {} columns",
                start + len,
                xv.cols()
            )));
        }
        let mut out = Tensor::zeros(xv.rows(), len);
        for b in 0..xv.rows() {
            out.row_mut(b)
                .copy_from_slice(&xv.row(b)[start..start + len]);
        }
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature {temperature} must be positive"
            )));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for b in 0..xv.rows() {
            let row = xv.row(b);
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
            let orow = out.row_mut(b);
            let mut total = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v / temperature - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(out, Op::Softmax { x, temperature }))
    }

    /// Reverse pass from `root` seeded with `seed` (same shape as `root`).
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(shape_err(
                "backward seed",
                self.value(root).shape(),
                seed.shape(),
            ));
        }
        let mut node_grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        node_grads.resize_with(root.0 + 1, || None);
        node_grads[root.0] = Some(seed);
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=root.0).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor)| {
                let slot = &mut node_grads[v.0];
                if slot.is_none() {
                    let s = self.value(v).shape();
                    *slot = Some(Tensor::zeros(s[0], s[1]));
                }
                f(slot.as_mut().unwrap());
            };
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    let Value::Param(id) = node.value else {
                        unreachable!()
                    };
                    out.dense_mut(id, g.shape()).add_assign(&g);
                }
                Op::Gather { table, lookup } => {
                    let rows = out.rows_mut(*table);
                    for b in 0..lookup.batch_size() {
                        let idx = lookup.instance(b);
                        let scale = 1.0 / idx.len() as f64;
                        for &r in idx {
                            let entry = rows.entry(r).or_insert_with(|| vec![0.0; g.cols()]);
                            for (e, gv) in entry.iter_mut().zip(g.row(b)) {
                                *e += gv * scale;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, &mut |ga| matmul_nt_into(&g, bv, ga));
                    acc(*b, &mut |gb| matmul_tn_into(av, &g, gb));
                }
                Op::AddRow(x, r) => {
                    acc(*x, &mut |gx| gx.add_assign(&g));
                    let cs = col_sum(&g);
                    acc(*r, &mut |gr| gr.add_assign(&cs));
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |ga| ga.add_assign(&g));
                    acc(*b, &mut |gb| gb.add_assign(&g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, &mut |ga| {
                        for ((o, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *o += gi * y;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((o, gi), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *o += gi * x;
                        }
                    });
                }
                Op::MulRow(x, r) => {
                    let (xv, rv) = (self.value(*x), self.value(*r));
                    acc(*x, &mut |gx| {
                        for b in 0..g.rows() {
                            for ((o, gi), rr) in
                                gx.row_mut(b).iter_mut().zip(g.row(b)).zip(rv.data())
                            {
                                *o += gi * rr;
                            }
                        }
                    });
                    acc(*r, &mut |gr| {
                        for b in 0..g.rows() {
                            for ((o, gi), xx) in
                                gr.data_mut().iter_mut().zip(g.row(b)).zip(xv.row(b))
                            {
                                *o += gi * xx;
                            }
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &mut |gx| {
                    for (o, gi) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += c * gi;
                    }
                }),
                Op::Act(x, act) => {
                    let (xv, yv) = (self.value(*x), self.value(Var(i)));
                    acc(*x, &mut |gx| {
                        for (((o, gi), xi), yi) in gx
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(xv.data())
                            .zip(yv.data())
                        {
                            *o += gi * act.derivative(*xi, *yi);
                        }
                    });
                }
                Op::Norm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let width = gv.cols();
                    let d = xhat.cols() as f64;
                    let mut g_gain = Tensor::zeros(1, width);
                    let mut g_shift = Tensor::zeros(1, width);
                    let mut dxhat = vec![0.0; xhat.cols()];
                    acc(*x, &mut |gx| {
                        for b in 0..g.rows() {
                            let (grow, hrow) = (g.row(b), xhat.row(b));
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for c in 0..dxhat.len() {
                                let u = c % width;
                                dxhat[c] = grow[c] * gv.data()[u];
                                g_gain.data_mut()[u] += grow[c] * hrow[c];
                                g_shift.data_mut()[u] += grow[c];
                                m1 += dxhat[c];
                                m2 += dxhat[c] * hrow[c];
                            }
                            m1 /= d;
                            m2 /= d;
                            let is = inv_std[b];
                            for (c, o) in gx.row_mut(b).iter_mut().enumerate() {
                                *o += is * (dxhat[c] - m1 - hrow[c] * m2);
                            }
                        }
                    });
                    acc(*gain, &mut |gg| gg.add_assign(&g_gain));
                    acc(*shift, &mut |gs| gs.add_assign(&g_shift));
                }
                Op::Mask(x, m) => acc(*x, &mut |gx| {
                    for ((o, gi), mi) in gx.data_mut().iter_mut().zip(g.data()).zip(m.data()) {
                        *o += gi * mi;
                    }
                }),
                Op::SumCols(x) => acc(*x, &mut |gx| {
                    for b in 0..gx.rows() {
                        let gb = g.get(b, 0);
                        for o in gx.row_mut(b) {
                            *o += gb;
                        }
                    }
                }),
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(p, &mut |gp| {
                            for b in 0..g.rows() {
                                for (o, gi) in gp.row_mut(b).iter_mut().zip(&g.row(b)[at..at + w]) {
                                    *o += gi;
                                }
                            }
                        });
                        at += w;
                    }
                }
                Op::Slice { x, start } => acc(*x, &mut |gx| {
                    for b in 0..g.rows() {
                        let w = g.cols();
                        for (o, gi) in gx.row_mut(b)[*start..*start + w].iter_mut().zip(g.row(b)) {
                            *o += gi;
                        }
                    }
                }),
                Op::Softmax { x, temperature } => {
                    let y = self.value(Var(i));
                    acc(*x, &mut |gx| {
                        for b in 0..g.rows() {
                            let (yr, gr) = (y.row(b), g.row(b));
                            let s: f64 = yr.iter().zip(gr).map(|(a, c)| a * c).sum();
                            for ((o, yi), gi) in gx.row_mut(b).iter_mut().zip(yr).zip(gr) {
                                *o += yi * (gi - s) / temperature;
                            }
                        }
                    });
                }
            }
        }

        for (id, grad) in out.iter() {
            let finite = match grad {
                Grad::Dense(t) => t.is_finite(),
                Grad::Rows(rows) => rows.values().flatten().all(|v| v.is_finite()),
            };
            if !finite {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}`",
                    self.params.param(id).name
                )));
            }
        }
        Ok(out)
    }
}
