use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How per-field embedding widths are chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmbeddingSizes {
    /// Every field uses width `k`.
    Fixed(usize),
    /// `k_i = min(ceil(c · ln N_i), max)`, at least 1.
    Adaptive { c: f64, max: usize },
}

impl EmbeddingSizes {
    pub fn widths(&self, field_sizes: &[usize]) -> Result<Vec<usize>> {
        match *self {
            EmbeddingSizes::Fixed(k) => {
                if k == 0 {
                    return Err(Error::InvalidArgument(
                        "embedding size k must be positive".into(),
                    ));
                }
                Ok(vec![k; field_sizes.len()])
            }
            EmbeddingSizes::Adaptive { c, max } => {
                if c <= 0.0 || max == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "adaptive embedding needs c > 0 and max > 0 (got c={c}, max={max})"
                    )));
                }
                Ok(field_sizes
                    .iter()
                    .map(|&n| ((c * (n as f64).ln()).ceil() as usize).clamp(1, max))
                    .collect())
            }
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, EmbeddingSizes::Fixed(_))
    }
}

/// Embedding lookup for one instance: each field's row (set fields: the
/// mean of their rows), concatenated in field order.
pub fn embed_lookup(tables: &[Tensor], instance: &[Vec<usize>]) -> Result<Vec<f64>> {
    if tables.len() != instance.len() {
        return Err(Error::Shape(format!(
            "{} tables for an instance with {} fields",
            tables.len(),
            instance.len()
        )));
    }
    let mut out = Vec::new();
    for (field, (table, rows)) in tables.iter().zip(instance).enumerate() {
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "field {field} has no value"
            )));
        }
        let mut acc = vec![0.0; table.cols()];
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::IndexOutOfRange {
                    field,
                    index: r,
                    size: table.rows(),
                });
            }
            for (a, v) in acc.iter_mut().zip(table.row(r)) {
                *a += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.extend(acc.into_iter().map(|v| v * inv));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_widths() {
        let sizes = EmbeddingSizes::Adaptive { c: 4.0, max: 40 };
        // ceil(4 ln 2) = 3, ceil(4 ln 7) = 8, ln 1 = 0 -> clamped to 1, large -> 40
        assert_eq!(
            sizes.widths(&[2, 7, 1, 1_000_000]).unwrap(),
            vec![3, 8, 1, 40]
        );
        assert_eq!(
            EmbeddingSizes::Fixed(5).widths(&[3, 9]).unwrap(),
            vec![5, 5]
        );
        assert!(EmbeddingSizes::Fixed(0).widths(&[3]).is_err());
    }

    #[test]
    fn lookup_examples() {
        let set_field = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let single = Tensor::from_rows(&[vec![0.3, -0.7], vec![9.0, 9.0]]).unwrap();
        let third = Tensor::from_rows(&[vec![2.0, 4.0]]).unwrap();
        let v = embed_lookup(&[set_field, single, third], &[vec![0, 1], vec![0], vec![0]]).unwrap();
        assert_eq!(v, vec![0.5, 0.5, 0.3, -0.7, 2.0, 4.0]);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn lookup_rejects_bad_index() {
        let t = Tensor::zeros(2, 2);
        assert!(matches!(
            embed_lookup(&[t], &[vec![2]]),
            Err(Error::IndexOutOfRange {
                index: 2,
                size: 2,
                ..
            })
        ));
    }
}
