//! Encoded instances, compact datasets, mini-batches and the encoded text
//! format `label fieldIdx:catIdx[,catIdx...] ...`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::Lookup;
use crate::error::{Error, Result};

/// One instance: a binary label and, per field, its category indices
/// (exactly one, or one or more for set fields).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstance {
    pub label: u8,
    pub values: Vec<Vec<usize>>,
}

impl EncodedInstance {
    pub fn single(label: u8, indices: &[usize]) -> Self {
        EncodedInstance {
            label,
            values: indices.iter().map(|&i| vec![i]).collect(),
        }
    }
}

/// Instances stored flat: `ptr[i * n + f]..ptr[i * n + f + 1]` indexes the
/// categories of field `f` of instance `i` in `idx`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    field_sizes: Vec<usize>,
    labels: Vec<u8>,
    ptr: Vec<u32>,
    idx: Vec<u32>,
}

/// A mini-batch in the layout the tape consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labels: Vec<f64>,
    pub fields: Vec<Lookup>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn from_instances(instances: &[EncodedInstance]) -> Result<Self> {
        let n = instances.first().map_or(0, |i| i.values.len());
        let mut fields = vec![
            Lookup {
                offsets: vec![0],
                rows: Vec::new()
            };
            n
        ];
        let mut labels = Vec::with_capacity(instances.len());
        for inst in instances {
            if inst.values.len() != n {
                return Err(Error::Shape("instances with different field counts".into()));
            }
            labels.push(f64::from(inst.label));
            for (lk, vals) in fields.iter_mut().zip(&inst.values) {
                lk.rows.extend_from_slice(vals);
                lk.offsets.push(lk.rows.len());
            }
        }
        Ok(Batch { labels, fields })
    }
}

impl Dataset {
    pub fn new(field_sizes: Vec<usize>) -> Self {
        Dataset {
            field_sizes,
            labels: Vec::new(),
            ptr: vec![0],
            idx: Vec::new(),
        }
    }

    pub fn field_sizes(&self) -> &[usize] {
        &self.field_sizes
    }

    pub fn num_fields(&self) -> usize {
        self.field_sizes.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positive_ratio(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&l| l as usize).sum::<usize>() as f64 / self.labels.len() as f64
    }

    pub fn values(&self, i: usize, field: usize) -> &[u32] {
        let at = i * self.num_fields() + field;
        &self.idx[self.ptr[at] as usize..self.ptr[at + 1] as usize]
    }

    pub fn instance(&self, i: usize) -> EncodedInstance {
        EncodedInstance {
            label: self.labels[i],
            values: (0..self.num_fields())
                .map(|f| self.values(i, f).iter().map(|&v| v as usize).collect())
                .collect(),
        }
    }

    pub fn push(&mut self, inst: &EncodedInstance) -> Result<()> {
        if inst.label > 1 {
            return Err(Error::InvalidArgument(format!(
                "label {} is not 0/1",
                inst.label
            )));
        }
        if inst.values.len() != self.num_fields() {
            return Err(Error::Shape(format!(
                "instance has {} fields, dataset has {}",
                inst.values.len(),
                self.num_fields()
            )));
        }
        for (f, (vals, &size)) in inst.values.iter().zip(&self.field_sizes).enumerate() {
            if vals.is_empty() {
                return Err(Error::InvalidArgument(format!("field {f} has no value")));
            }
            if let Some(&bad) = vals.iter().find(|&&v| v >= size) {
                return Err(Error::IndexOutOfRange {
                    field: f,
                    index: bad,
                    size,
                });
            }
        }
        for vals in &inst.values {
            self.idx.extend(vals.iter().map(|&v| v as u32));
            self.ptr.push(self.idx.len() as u32);
        }
        self.labels.push(inst.label);
        Ok(())
    }

    /// Copy row `i` of `other` (same schema) onto the end.
    pub fn push_row(&mut self, other: &Dataset, i: usize) {
        debug_assert_eq!(self.field_sizes, other.field_sizes);
        for f in 0..other.num_fields() {
            self.idx.extend_from_slice(other.values(i, f));
            self.ptr.push(self.idx.len() as u32);
        }
        self.labels.push(other.labels[i]);
    }

    pub fn subset(&self, rows: impl IntoIterator<Item = usize>) -> Dataset {
        let mut out = Dataset::new(self.field_sizes.clone());
        for i in rows {
            out.push_row(self, i);
        }
        out
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let n = self.num_fields();
        let mut fields: Vec<Lookup> = (0..n)
            .map(|_| Lookup {
                offsets: Vec::with_capacity(rows.len() + 1),
                rows: Vec::with_capacity(rows.len()),
            })
            .collect();
        for lk in &mut fields {
            lk.offsets.push(0);
        }
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            labels.push(f64::from(self.labels[i]));
            for (f, lk) in fields.iter_mut().enumerate() {
                lk.rows
                    .extend(self.values(i, f).iter().map(|&v| v as usize));
                lk.offsets.push(lk.rows.len());
            }
        }
        Batch { labels, fields }
    }

    pub fn write_encoded<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.len() {
            write!(w, "{}", self.labels[i])?;
            for f in 0..self.num_fields() {
                write!(w, " {f}:")?;
                for (j, v) in self.values(i, f).iter().enumerate() {
                    if j > 0 {
                        w.write_all(b",")?;
                    }
                    write!(w, "{v}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parse encoded lines against known field sizes.
    pub fn read_encoded<R: BufRead>(r: R, field_sizes: Vec<usize>) -> Result<Dataset> {
        let mut data = Dataset::new(field_sizes);
        for (i, line) in r.lines().enumerate() {
            let loc = format!("data line {}", i + 1);
            let line = line.map_err(|e| Error::parse(&loc, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let inst = parse_encoded_line(&line, data.num_fields()).map_err(|e| match e {
                Error::Parse { message, .. } => Error::parse(&loc, message),
                other => Error::parse(&loc, other.to_string()),
            })?;
            data.push(&inst)
                .map_err(|e| Error::parse(&loc, e.to_string()))?;
        }
        Ok(data)
    }
}

/// Parse one `label f:c[,c...] ...` line with exactly `n_fields` fields in
/// ascending order.
/// Random instances over `field_sizes` with fair-coin labels. Fields listed
/// in `set_fields` draw one to three distinct values.
pub fn random_batch(field_sizes: &[usize], size: usize, set_fields: &[usize], seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<EncodedInstance> = (0..size)
        .map(|_| {
            let values = field_sizes
                .iter()
                .enumerate()
                .map(|(f, &n)| {
                    let count = if set_fields.contains(&f) {
                        rng.gen_range(1..=3.min(n))
                    } else {
                        1
                    };
                    rand::seq::index::sample(&mut rng, n, count).into_vec()
                })
                .collect();
            EncodedInstance {
                label: rng.gen_range(0..=1),
                values,
            }
        })
        .collect();
    Batch::from_instances(&instances).expect("instances share one field count")
}

pub fn parse_encoded_line(line: &str, n_fields: usize) -> Result<EncodedInstance> {
    let mut toks = line.split_whitespace();
    let label = match toks.next() {
        Some("0") => 0,
        Some("1") => 1,
        Some(other) => {
            return Err(Error::parse(
                "encoded line",
                format!("label `{other}` is not 0 or 1"),
            ))
        }
        None => return Err(Error::parse("encoded line", "empty line")),
    };
    let mut values = Vec::with_capacity(n_fields);
    for tok in toks {
        let (f, cats) = tok.split_once(':').ok_or_else(|| {
            Error::parse(
                "encoded line",
                format!("token `{tok}` is not field:category"),
            )
        })?;
        let f: usize = f
            .parse()
            .map_err(|_| Error::parse("encoded line", format!("bad field index in `{tok}`")))?;
        if f != values.len() {
            return Err(Error::parse(
                "encoded line",
                format!("field {f} out of order (expected {})", values.len()),
            ));
        }
        let cats = cats
            .split(',')
            .map(|c| c.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse("encoded line", format!("bad category in `{tok}`")))?;
        values.push(cats);
    }
    if values.len() != n_fields {
        return Err(Error::parse(
            "encoded line",
            format!("{} fields, expected {n_fields}", values.len()),
        ));
    }
    Ok(EncodedInstance { label, values })
}
