use std::io::Write;

use crate::compute::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::extractors::{kernel_product, KernelMode};
use crate::models::{Family, Model};

/// Per-column mean over the rows of `table`.
pub fn mean_embeddings(table: &Tensor) -> Result<Vec<f64>> {
    if table.rows() == 0 {
        return Err(Error::EmptyField("embedding table has no rows".into()));
    }
    let mut mean = vec![0.0; table.cols()];
    for r in 0..table.rows() {
        for (m, v) in mean.iter_mut().zip(table.row(r)) {
            *m += v;
        }
    }
    let inv = 1.0 / table.rows() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub family: Family,
    pub fields: Vec<String>,
    /// `n × n`, zero diagonal.
    pub values: Tensor,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Interaction strength between the mean embeddings of every field pair.
pub fn heatmap(model: &Model, params: &ParamStore, field_names: &[String]) -> Result<Heatmap> {
    let n = model.num_fields();
    if field_names.len() != n {
        return Err(Error::Shape(format!(
            "{} field names for {n} fields",
            field_names.len()
        )));
    }
    let table = |name: String| {
        params
            .by_name(&name)
            .ok_or_else(|| Error::Shape(format!("parameters lack `{name}`")))
    };
    let mut values = Tensor::zeros(n, n);
    match model.family() {
        Family::Fm | Family::Kfm => {
            let centers: Vec<Vec<f64>> = (0..n)
                .map(|i| mean_embeddings(table(format!("embed.{i}"))?))
                .collect::<Result<_>>()?;
            for &(i, j) in model.pairs().pairs() {
                let v = if model.family() == Family::Fm {
                    dot(&centers[i], &centers[j])
                } else {
                    match model.spec().kernel_mode {
                        KernelMode::Matrix => kernel_product(
                            &centers[i],
                            table(format!("kernel.{i}.{j}"))?,
                            &centers[j],
                        )?,
                        KernelMode::Vector => {
                            let phi = table(format!("kernel.{i}.{j}"))?;
                            centers[i]
                                .iter()
                                .zip(phi.data())
                                .zip(&centers[j])
                                .map(|((a, f), b)| a * f * b)
                                .sum()
                        }
                        KernelMode::Identity => dot(&centers[i], &centers[j]),
                    }
                };
                values.set(i, j, v);
                values.set(j, i, v);
            }
        }
        Family::Ffm => {
            let k = model.embedding_widths()[0];
            let centers: Vec<Vec<f64>> = (0..n)
                .map(|i| mean_embeddings(table(format!("ffm.{i}"))?))
                .collect::<Result<_>>()?;
            let slot = |i: usize, j: usize| if j < i { j } else { j - 1 };
            for &(i, j) in model.pairs().pairs() {
                let a = &centers[i][slot(i, j) * k..(slot(i, j) + 1) * k];
                let b = &centers[j][slot(j, i) * k..(slot(j, i) + 1) * k];
                let v = dot(a, b);
                values.set(i, j, v);
                values.set(j, i, v);
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "heatmaps are defined for fm, ffm and kfm, not {other}"
            )))
        }
    }
    Ok(Heatmap {
        family: model.family(),
        fields: field_names.to_vec(),
        values,
    })
}

impl Heatmap {
    /// Header row of field names, then one row per field.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.fields.join(","))?;
        for r in 0..self.values.rows() {
            let row: Vec<String> = self.values.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn range(&self) -> (f64, f64) {
        self.values
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Binary PGM, one pixel per cell, linearly scaled from min (black) to
    /// max (white). The range goes in the sidecar.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (lo, hi) = self.range();
        let n = self.values.rows();
        write!(w, "P5\n{n} {n}\n255\n")?;
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels: Vec<u8> = self
            .values
            .data()
            .iter()
            .map(|v| ((v - lo) / span * 255.0).round() as u8)
            .collect();
        w.write_all(&pixels)
    }

    pub fn sidecar(&self) -> String {
        let (lo, hi) = self.range();
        format!("family={}\nmin={lo}\nmax={hi}\n", self.family)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::EmbeddingSizes;
    use crate::models::{randomize_params, ModelSpec};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn mean_embedding_examples() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean_embeddings(&t).unwrap(), vec![0.5, 0.5]);
        let t = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
        assert_eq!(mean_embeddings(&t).unwrap(), vec![3.0, -1.0]);
        let t = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(mean_embeddings(&t).unwrap(), vec![2.0, 2.0]);
        assert!(mean_embeddings(&Tensor::zeros(0, 2)).is_err());
    }

    fn spec(family: Family) -> ModelSpec {
        ModelSpec {
            embedding: EmbeddingSizes::Fixed(2),
            ..ModelSpec::new(family)
        }
    }

    #[test]
    fn fm_heatmap_example() {
        let model = Model::new(spec(Family::Fm), &[1, 1, 1]).unwrap();
        let mut p = model.init_params(1);
        for (i, v) in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].iter().enumerate() {
            p.by_name_mut(&format!("embed.{i}"))
                .unwrap()
                .row_mut(0)
                .copy_from_slice(v);
        }
        let h = heatmap(&model, &p, &names(3)).unwrap();
        assert_eq!(
            h.values.data(),
            &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]
        );

        let mut zero = p.clone();
        randomize_params(&mut zero, 0.0, 1);
        assert!(heatmap(&model, &zero, &names(3))
            .unwrap()
            .values
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn heatmaps_are_symmetric_with_zero_diagonal() {
        let sizes = [3, 4, 2, 5];
        for family in [Family::Fm, Family::Ffm, Family::Kfm] {
            let model = Model::new(spec(family), &sizes).unwrap();
            let mut p = model.init_params(1);
            randomize_params(&mut p, 1.0, 4);
            let h = heatmap(&model, &p, &names(4)).unwrap();
            for i in 0..4 {
                assert_eq!(h.values.get(i, i), 0.0);
                for j in 0..4 {
                    assert!((h.values.get(i, j) - h.values.get(j, i)).abs() <= 1e-12);
                }
            }
        }
        let lr = Model::new(ModelSpec::new(Family::Lr), &sizes).unwrap();
        assert!(heatmap(&lr, &lr.init_params(1), &names(4)).is_err());
    }

    #[test]
    fn identity_kernel_heatmap_equals_fm() {
        let sizes = [3, 4, 2];
        let fm = Model::new(spec(Family::Fm), &sizes).unwrap();
        let kfm = Model::new(spec(Family::Kfm), &sizes).unwrap();
        let mut pf = fm.init_params(1);
        randomize_params(&mut pf, 1.0, 2);
        let mut pk = kfm.init_params(1);
        for i in 0..3 {
            let name = format!("embed.{i}");
            *pk.by_name_mut(&name).unwrap() = pf.by_name(&name).unwrap().clone();
        }
        let a = heatmap(&fm, &pf, &names(3)).unwrap();
        let b = heatmap(&kfm, &pk, &names(3)).unwrap();
        assert!(a.values.max_abs_diff(&b.values) <= 1e-15);
    }

    #[test]
    fn csv_and_image_output() {
        let model = Model::new(spec(Family::Fm), &[1, 1]).unwrap();
        let mut p = model.init_params(1);
        p.by_name_mut("embed.0")
            .unwrap()
            .row_mut(0)
            .copy_from_slice(&[1.0, 2.0]);
        p.by_name_mut("embed.1")
            .unwrap()
            .row_mut(0)
            .copy_from_slice(&[3.0, 1.0]);
        let h = heatmap(&model, &p, &["a".into(), "b".into()]).unwrap();
        let mut csv = Vec::new();
        h.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "a,b\n0,5\n5,0\n");
        let mut img = Vec::new();
        h.write_pgm(&mut img).unwrap();
        assert_eq!(&img[img.len() - 4..], &[0, 255, 255, 0]);
        assert_eq!(h.sidecar(), "family=fm\nmin=0\nmax=5\n");
    }
}
