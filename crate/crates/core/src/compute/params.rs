use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Row-sparse parameters (embedding tables, per-category weights) receive
    /// gradients only on rows looked up in the forward pass.
    pub sparse: bool,
}

/// Named-tensor store in a fixed insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, sparse: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            sparse,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |id| self.get_mut(id))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replace values from a checkpoint. Every stored tensor must be present
    /// with the same shape; extra checkpoint tensors are an error.
    pub fn load_values(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, value) in tensors {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Shape(format!("unexpected tensor `{name}`")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}` is {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub model: String,
    pub n_fields: usize,
    pub seed: Option<u64>,
}

/// Text checkpoint:
///
/// ```text
/// CKPT v1 model=<name> n=<n> [seed=<s>]
/// tensor <name> <rows> <cols>
/// <row of cols floats>
/// ...
/// ```
///
/// Floats use Rust's shortest round-trip formatting, so a read-back is
/// bit-identical.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    header: &CheckpointHeader,
    store: &ParamStore,
) -> std::io::Result<()> {
    write!(w, "CKPT v1 model={} n={}", header.model, header.n_fields)?;
    if let Some(seed) = header.seed {
        write!(w, " seed={seed}")?;
    }
    writeln!(w)?;
    for (_, p) in store.iter() {
        writeln!(w, "tensor {} {} {}", p.name, p.value.rows(), p.value.cols())?;
        for r in 0..p.value.rows() {
            let mut first = true;
            for v in p.value.row(r) {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                write!(w, "{v:?}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut lines = r.lines().enumerate();
    let next =
        |lines: &mut std::iter::Enumerate<std::io::Lines<R>>| -> Result<Option<(usize, String)>> {
            match lines.next() {
                None => Ok(None),
                Some((i, line)) => line
                    .map(|l| Some((i + 1, l)))
                    .map_err(|e| Error::parse(format!("checkpoint line {}", i + 1), e.to_string())),
            }
        };

    let (_, first) = next(&mut lines)?.ok_or_else(|| Error::Empty("checkpoint".into()))?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some("CKPT") || parts.next() != Some("v1") {
        return Err(Error::parse(
            "checkpoint line 1",
            "expected `CKPT v1` header",
        ));
    }
    let mut model = None;
    let mut n_fields = None;
    let mut seed = None;
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse("checkpoint line 1", format!("bad header token `{kv}`")))?;
        let bad = |_| Error::parse("checkpoint line 1", format!("bad value in `{kv}`"));
        match k {
            "model" => model = Some(v.to_string()),
            "n" => n_fields = Some(v.parse::<usize>().map_err(bad)?),
            "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
            _ => {}
        }
    }
    let header = CheckpointHeader {
        model: model.ok_or_else(|| Error::parse("checkpoint line 1", "missing model="))?,
        n_fields: n_fields.ok_or_else(|| Error::parse("checkpoint line 1", "missing n="))?,
        seed,
    };

    let mut tensors = Vec::new();
    while let Some((lineno, line)) = next(&mut lines)? {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("checkpoint line {lineno}");
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "tensor" {
            return Err(Error::parse(loc, "expected `tensor <name> <rows> <cols>`"));
        }
        let rows: usize = toks[2]
            .parse()
            .map_err(|_| Error::parse(&loc, "bad row count"))?;
        let cols: usize = toks[3]
            .parse()
            .map_err(|_| Error::parse(&loc, "bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rl, row) = next(&mut lines)?
                .ok_or_else(|| Error::parse(&loc, format!("tensor `{}` is truncated", toks[1])))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| {
                    Error::parse(
                        format!("checkpoint line {rl}"),
                        format!("bad float `{tok}`"),
                    )
                })?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(Error::parse(
                    format!("checkpoint line {rl}"),
                    format!("expected {cols} values"),
                ));
            }
        }
        tensors.push((toks[1].to_string(), Tensor::from_vec(rows, cols, data)?));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6)) {
            let mut store = ParamStore::new();
            store.insert("a.b", Tensor::from_vec(2, 3, values.clone()).unwrap(), false);
            store.insert("bias", Tensor::scalar(values[0]), false);
            let header = CheckpointHeader { model: "fm".into(), n_fields: 3, seed: Some(7) };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &header, &store).unwrap();
            let (h, tensors) = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(h, header);
            for ((_, p), (name, t)) in store.iter().zip(&tensors) {
                prop_assert_eq!(&p.name, name);
                for (a, b) in p.value.data().iter().zip(t.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(2, 2), false);
        let err = store
            .load_values(vec![("w".into(), Tensor::zeros(2, 3))])
            .unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn header_requires_magic() {
        assert!(read_checkpoint(&b"CKPT v2 model=fm n=1\n"[..]).is_err());
        let (h, t) = read_checkpoint(&b"CKPT v1 model=lr n=2\n"[..]).unwrap();
        assert_eq!(h.model, "lr");
        assert_eq!(h.seed, None);
        assert!(t.is_empty());
    }
}
