//! Mapping raw multi-field records to dense per-field category indices.
//!
//! Every field reserves its last index for `other`, which absorbs rare and
//! unseen categories (and unparseable numerical values). Categories inside a
//! field are ordered lexicographically; numerical fields are cut into
//! equal-frequency buckets with left-closed intervals.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, EncodedInstance};
use crate::error::{Error, Result};

pub const OTHER: &str = "other";

/// Separator between members of a set-field value.
pub const SET_SEPARATOR: char = '|';

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Categorical,
    Numerical,
    Set,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub min_count: usize,
    /// Strictly increasing bucket thresholds (numerical fields only).
    pub bucket_edges: Vec<f64>,
    categories: Vec<String>,
    index: HashMap<String, usize>,
}

impl FieldSpec {
    fn new(
        name: String,
        kind: FieldKind,
        min_count: usize,
        bucket_edges: Vec<f64>,
        mut categories: Vec<String>,
    ) -> Self {
        categories.retain(|c| c != OTHER);
        categories.push(OTHER.to_string());
        let index = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        FieldSpec {
            name,
            kind,
            min_count,
            bucket_edges,
            categories,
            index,
        }
    }

    /// Number of categories `N_i`, including `other`.
    pub fn size(&self) -> usize {
        self.categories.len()
    }

    pub fn other_index(&self) -> usize {
        self.categories.len() - 1
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Index for one raw value of this field.
    pub fn index_of(&self, raw: &str) -> usize {
        match self.kind {
            FieldKind::Numerical => match raw.trim().parse::<f64>() {
                Ok(v) if !v.is_nan() => self.bucket_edges.partition_point(|&e| e <= v),
                _ => self.other_index(),
            },
            _ => self.index.get(raw).copied().unwrap_or(self.other_index()),
        }
    }

    fn encode_value(&self, raw: &str) -> Vec<usize> {
        match self.kind {
            FieldKind::Set => {
                let mut out: Vec<usize> = raw
                    .split(SET_SEPARATOR)
                    .filter(|s| !s.is_empty())
                    .map(|s| self.index_of(s))
                    .collect();
                if out.is_empty() {
                    out.push(self.other_index());
                }
                out
            }
            _ => vec![self.index_of(raw)],
        }
    }
}

fn bucket_name(lo: Option<f64>, hi: Option<f64>) -> String {
    let fmt = |v: Option<f64>, inf: &str| v.map_or(inf.to_string(), |x| format!("{x:?}"));
    format!("[{},{})", fmt(lo, "-inf"), fmt(hi, "inf"))
}

fn parse_bucket_name(name: &str) -> Option<(Option<f64>, Option<f64>)> {
    let inner = name.strip_prefix('[')?.strip_suffix(')')?;
    let (lo, hi) = inner.split_once(',')?;
    let lo = if lo == "-inf" {
        None
    } else {
        Some(lo.parse().ok()?)
    };
    let hi = if hi == "inf" {
        None
    } else {
        Some(hi.parse().ok()?)
    };
    Some((lo, hi))
}

/// Ordered field specs plus the total category count `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    fields: Vec<FieldSpec>,
    total: usize,
}

/// A labelled raw record: field name → raw value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawRecord {
    pub label: u8,
    pub values: HashMap<String, String>,
}

impl RawRecord {
    pub fn new<K: Into<String>, V: Into<String>>(
        label: u8,
        values: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        RawRecord {
            label,
            values: values
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }
}

/// Declared name and kind of one input column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldDecl {
    pub name: String,
    pub kind: FieldKind,
}

impl FieldDecl {
    pub fn new(name: impl Into<String>, kind: FieldKind) -> Self {
        FieldDecl {
            name: name.into(),
            kind,
        }
    }
}

/// Equal-frequency edges: cut the sorted sample into `buckets` runs whose
/// lengths differ by at most one, placing each edge midway between the last
/// value of one run and the first of the next. Coinciding edges collapse.
pub fn equal_frequency_edges(values: &[f64], buckets: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let mut edges: Vec<f64> = Vec::new();
    for j in 1..buckets {
        let p = j * m / buckets;
        if p == 0 || p >= m {
            continue;
        }
        let (a, b) = (sorted[p - 1], sorted[p]);
        if a == b {
            continue;
        }
        let edge = a + (b - a) / 2.0;
        if edges.last().is_none_or(|&last| edge > last) {
            edges.push(edge);
        }
    }
    edges
}

impl FeatureMap {
    /// Build a map from a record stream.
    ///
    /// Categories seen fewer than `min_count` times fold into `other`;
    /// numerical fields get up to `bucket_count` equal-frequency buckets.
    pub fn build<'a, I>(
        records: I,
        schema: &[FieldDecl],
        min_count: usize,
        bucket_count: usize,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a RawRecord>,
    {
        if bucket_count == 0 {
            return Err(Error::InvalidArgument(
                "bucket_count must be at least 1".into(),
            ));
        }
        if schema.is_empty() {
            return Err(Error::Empty("field schema".into()));
        }
        let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); schema.len()];
        let mut numbers: Vec<Vec<f64>> = vec![Vec::new(); schema.len()];
        let mut seen = 0usize;
        for rec in records {
            seen += 1;
            for (f, decl) in schema.iter().enumerate() {
                let raw = rec
                    .values
                    .get(&decl.name)
                    .ok_or_else(|| Error::MissingField(decl.name.clone()))?;
                match decl.kind {
                    FieldKind::Numerical => {
                        if let Ok(v) = raw.trim().parse::<f64>() {
                            if !v.is_nan() {
                                numbers[f].push(v);
                            }
                        }
                    }
                    FieldKind::Categorical => *counts[f].entry(raw.clone()).or_default() += 1,
                    FieldKind::Set => {
                        for member in raw.split(SET_SEPARATOR).filter(|s| !s.is_empty()) {
                            *counts[f].entry(member.to_string()).or_default() += 1;
                        }
                    }
                }
            }
        }
        if seen == 0 {
            return Err(Error::Empty("record stream".into()));
        }

        let mut fields = Vec::with_capacity(schema.len());
        for (f, decl) in schema.iter().enumerate() {
            let spec = match decl.kind {
                FieldKind::Numerical => {
                    if numbers[f].is_empty() {
                        return Err(Error::EmptyField(decl.name.clone()));
                    }
                    let edges = equal_frequency_edges(&numbers[f], bucket_count);
                    Self::numerical_field(decl.name.clone(), min_count, edges)
                }
                _ => {
                    let mut cats: Vec<String> = counts[f]
                        .iter()
                        .filter(|(c, &n)| n >= min_count && c.as_str() != OTHER)
                        .map(|(c, _)| c.clone())
                        .collect();
                    if cats.is_empty() {
                        return Err(Error::EmptyField(decl.name.clone()));
                    }
                    cats.sort();
                    FieldSpec::new(decl.name.clone(), decl.kind, min_count, Vec::new(), cats)
                }
            };
            fields.push(spec);
        }
        Ok(Self::from_fields(fields))
    }

    fn numerical_field(name: String, min_count: usize, edges: Vec<f64>) -> FieldSpec {
        let mut cats = Vec::with_capacity(edges.len() + 1);
        for i in 0..=edges.len() {
            let lo = i.checked_sub(1).map(|j| edges[j]);
            cats.push(bucket_name(lo, edges.get(i).copied()));
        }
        FieldSpec::new(name, FieldKind::Numerical, min_count, edges, cats)
    }

    /// A map with explicitly ordered vocabularies (`other` is appended).
    pub fn with_categories(fields: Vec<(String, FieldKind, Vec<String>)>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Empty("field list".into()));
        }
        let mut specs = Vec::with_capacity(fields.len());
        for (name, kind, cats) in fields {
            if kind == FieldKind::Numerical {
                return Err(Error::InvalidArgument(format!(
                    "field `{name}`: numerical fields are built from bucket edges"
                )));
            }
            specs.push(FieldSpec::new(name, kind, 0, Vec::new(), cats));
        }
        Ok(Self::from_fields(specs))
    }

    /// Map for synthetic data: field `i` is named `f<i>` with categories
    /// `c0..c{N_i-2}` and `other`.
    pub fn synthetic(field_sizes: &[usize]) -> Result<Self> {
        let fields = field_sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                if n == 0 {
                    return Err(Error::EmptyField(format!("f{i}")));
                }
                let cats = (0..n - 1).map(|c| format!("c{c}")).collect();
                Ok((format!("f{i}"), FieldKind::Categorical, cats))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_categories(fields)
    }

    fn from_fields(fields: Vec<FieldSpec>) -> Self {
        let total = fields.iter().map(FieldSpec::size).sum();
        FeatureMap { fields, total }
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    /// `N`, the sum of all field sizes.
    pub fn total_categories(&self) -> usize {
        self.total
    }

    pub fn field_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(FieldSpec::size).collect()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Re-declare the named fields as set fields (the map file does not
    /// record the distinction between categorical and set fields).
    pub fn mark_set_fields(&mut self, names: &[String]) -> Result<()> {
        for name in names {
            let i = self
                .field_index(name)
                .ok_or_else(|| Error::UnknownField(name.clone()))?;
            if self.fields[i].kind == FieldKind::Numerical {
                return Err(Error::InvalidArgument(format!(
                    "numerical field `{name}` cannot be a set field"
                )));
            }
            self.fields[i].kind = FieldKind::Set;
        }
        Ok(())
    }

    pub fn encode(&self, record: &RawRecord) -> Result<EncodedInstance> {
        let mut values = Vec::with_capacity(self.fields.len());
        for field in &self.fields {
            let raw = record
                .values
                .get(&field.name)
                .ok_or_else(|| Error::MissingField(field.name.clone()))?;
            values.push(field.encode_value(raw));
        }
        Ok(EncodedInstance {
            label: record.label,
            values,
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "FMAP v1 n={} N={}", self.fields.len(), self.total)?;
        for (fi, field) in self.fields.iter().enumerate() {
            for (ci, cat) in field.categories.iter().enumerate() {
                writeln!(w, "{}\t{fi}\t{cat}\t{ci}", field.name)?;
            }
        }
        Ok(())
    }

    /// Read a map file. Fields whose non-`other` categories are all bucket
    /// intervals `[lo,hi)` come back as numerical.
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Empty("feature map".into()))?
            .map_err(|e| Error::parse("map line 1", e.to_string()))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("FMAP") || toks.next() != Some("v1") {
            return Err(Error::parse("map line 1", "expected `FMAP v1` header"));
        }
        let mut n = None;
        let mut total = None;
        for kv in toks {
            match kv.split_once('=') {
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                Some(("N", v)) => total = v.parse::<usize>().ok(),
                _ => {
                    return Err(Error::parse(
                        "map line 1",
                        format!("bad header token `{kv}`"),
                    ))
                }
            }
        }
        let n = n.ok_or_else(|| Error::parse("map line 1", "missing n="))?;
        let total = total.ok_or_else(|| Error::parse("map line 1", "missing N="))?;

        let mut raw: Vec<(String, Vec<String>)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let loc = format!("map line {}", i + 2);
            let line = line.map_err(|e| Error::parse(&loc, e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::parse(loc, "expected 4 tab-separated columns"));
            }
            let fi: usize = cols[1]
                .parse()
                .map_err(|_| Error::parse(&loc, "bad field index"))?;
            let ci: usize = cols[3]
                .parse()
                .map_err(|_| Error::parse(&loc, "bad category index"))?;
            if fi == raw.len() {
                raw.push((cols[0].to_string(), Vec::new()));
            }
            let len = raw.len();
            let Some((name, cats)) = raw.get_mut(fi).filter(|_| fi + 1 == len) else {
                return Err(Error::parse(
                    loc,
                    "field indices must be contiguous and ascending",
                ));
            };
            if name != cols[0] || ci != cats.len() {
                return Err(Error::parse(
                    loc,
                    "category indices must be contiguous within a field",
                ));
            }
            cats.push(cols[2].to_string());
        }
        if raw.len() != n {
            return Err(Error::parse(
                "feature map",
                format!("header says n={n}, found {} fields", raw.len()),
            ));
        }

        let mut fields = Vec::with_capacity(n);
        for (name, cats) in raw {
            if cats.last().map(String::as_str) != Some(OTHER) {
                return Err(Error::parse(
                    "feature map",
                    format!("field `{name}` must end with `{OTHER}`"),
                ));
            }
            let body = &cats[..cats.len() - 1];
            let intervals: Option<Vec<_>> = body.iter().map(|c| parse_bucket_name(c)).collect();
            let spec = match intervals {
                Some(iv) if !iv.is_empty() => {
                    let edges: Vec<f64> = iv.iter().skip(1).filter_map(|(lo, _)| *lo).collect();
                    Self::numerical_field(name, 0, edges)
                }
                _ => FieldSpec::new(name, FieldKind::Categorical, 0, Vec::new(), body.to_vec()),
            };
            fields.push(spec);
        }
        let map = Self::from_fields(fields);
        if map.total != total {
            return Err(Error::parse(
                "feature map",
                format!("header says N={total}, found {}", map.total),
            ));
        }
        Ok(map)
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureMap(n={}, N={})", self.fields.len(), self.total)
    }
}

/// Probability of keeping a negative so that a stream with positive ratio
/// `alpha` ends up with positive ratio `target` in expectation.
pub fn negative_keep_probability(alpha: f64, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target positive ratio {target} must be in (0, 1)"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "positive ratio {alpha} leaves no room for down-sampling"
        )));
    }
    Ok((alpha * (1.0 - target) / (target * (1.0 - alpha))).clamp(0.0, 1.0))
}

/// Streaming negative down-sampler: positives always pass, negatives pass
/// independently with a fixed probability.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    keep_probability: f64,
    rng: ChaCha8Rng,
}

impl NegativeSampler {
    pub fn new(alpha: f64, target: f64, seed: u64) -> Result<Self> {
        Ok(NegativeSampler {
            keep_probability: negative_keep_probability(alpha, target)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn keep_probability(&self) -> f64 {
        self.keep_probability
    }

    pub fn keep(&mut self, label: u8) -> bool {
        // One draw per negative regardless of outcome keeps the stream reproducible.
        label == 1 || self.rng.gen::<f64>() < self.keep_probability
    }
}

/// Two-pass down-sampling of a dataset: measure its positive ratio, then
/// filter negatives.
pub fn downsample_negatives(data: &Dataset, target: f64, seed: u64) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let mut sampler = NegativeSampler::new(data.positive_ratio(), target, seed)?;
    let mut out = Dataset::new(data.field_sizes().to_vec());
    for i in 0..data.len() {
        if sampler.keep(data.label(i)) {
            out.push_row(data, i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1() -> Vec<RawRecord> {
        let rows = [
            (1, "Tuesday", "Male", "London"),
            (0, "Monday", "Female", "New York"),
            (1, "Tuesday", "Female", "Hong Kong"),
            (0, "Tuesday", "Male", "Tokyo"),
        ];
        rows.iter()
            .map(|&(y, w, g, c)| RawRecord::new(y, [("WEEKDAY", w), ("GENDER", g), ("CITY", c)]))
            .collect()
    }

    fn table1_schema() -> Vec<FieldDecl> {
        ["WEEKDAY", "GENDER", "CITY"]
            .iter()
            .map(|n| FieldDecl::new(*n, FieldKind::Categorical))
            .collect()
    }

    #[test]
    fn rare_categories_fold_into_other() {
        let mut recs = Vec::new();
        for (v, n) in [("Male", 50), ("Female", 50), ("X", 3)] {
            for _ in 0..n {
                recs.push(RawRecord::new(0, [("GENDER", v)]));
            }
        }
        let schema = [FieldDecl::new("GENDER", FieldKind::Categorical)];
        let map = FeatureMap::build(&recs, &schema, 20, 1).unwrap();
        let f = &map.fields()[0];
        assert_eq!(f.categories(), &["Female", "Male", "other"]);
        assert_eq!(f.size(), 3);
        assert_eq!(f.index_of("X"), 2);

        let all = FeatureMap::build(&recs, &schema, 0, 1).unwrap();
        assert_eq!(
            all.fields()[0].categories(),
            &["Female", "Male", "X", "other"]
        );
    }

    #[test]
    fn equal_frequency_split() {
        assert_eq!(equal_frequency_edges(&[4.0, 1.0, 3.0, 2.0], 2), vec![2.5]);
        let recs: Vec<_> = (1..=4)
            .map(|v| RawRecord::new(0, [("x", v.to_string())]))
            .collect();
        let map =
            FeatureMap::build(&recs, &[FieldDecl::new("x", FieldKind::Numerical)], 0, 2).unwrap();
        let f = &map.fields()[0];
        assert_eq!(f.bucket_edges, vec![2.5]);
        assert_eq!(
            [1, 2, 3, 4].map(|v| f.index_of(&v.to_string())),
            [0, 0, 1, 1]
        );
        assert_eq!(f.index_of("n/a"), f.other_index());
        assert_eq!(f.size(), 3);
    }

    #[test]
    fn left_closed_buckets() {
        let f = FeatureMap::numerical_field("age".into(), 0, vec![18.0, 28.0]);
        assert_eq!(f.index_of("17.9"), 0);
        assert_eq!(f.index_of("18"), 1);
        assert_eq!(f.index_of("27"), 1);
        assert_eq!(f.index_of("28"), 2);
        assert_eq!(f.index_of("1e9"), 2);
    }

    #[test]
    fn encode_table1_lexicographic() {
        let recs = table1();
        let map = FeatureMap::build(&recs, &table1_schema(), 0, 1).unwrap();
        // WEEKDAY {Monday, Tuesday, other}, GENDER {Female, Male, other},
        // CITY {Hong Kong, London, New York, Tokyo, other}
        assert_eq!(map.field_sizes(), vec![3, 3, 5]);
        let enc = map.encode(&recs[0]).unwrap();
        assert_eq!(enc.values, vec![vec![1], vec![1], vec![1]]);
        assert_eq!(enc.label, 1);

        let unseen = RawRecord::new(
            0,
            [
                ("WEEKDAY", "Monday"),
                ("GENDER", "Male"),
                ("CITY", "Atlantis"),
            ],
        );
        assert_eq!(map.encode(&unseen).unwrap().values[2], vec![4]);

        let missing = RawRecord::new(0, [("WEEKDAY", "Monday")]);
        let err = map.encode(&missing).unwrap_err();
        assert!(err.to_string().contains("GENDER"), "{err}");
    }

    #[test]
    fn encode_table1_declared_order() {
        // Vocabularies in the order of the one-hot illustration.
        let map = FeatureMap::with_categories(vec![
            (
                "WEEKDAY".into(),
                FieldKind::Categorical,
                [
                    "Monday",
                    "Tuesday",
                    "Wednesday",
                    "Thursday",
                    "Friday",
                    "Saturday",
                    "Sunday",
                ]
                .map(String::from)
                .to_vec(),
            ),
            (
                "GENDER".into(),
                FieldKind::Categorical,
                vec!["Male".into(), "Female".into()],
            ),
            (
                "CITY".into(),
                FieldKind::Categorical,
                ["New York", "Hong Kong", "London", "Tokyo"]
                    .map(String::from)
                    .to_vec(),
            ),
        ])
        .unwrap();
        let enc = map.encode(&table1()[0]).unwrap();
        assert_eq!(enc.values, vec![vec![1], vec![0], vec![2]]);
    }

    #[test]
    fn set_fields_encode_every_member() {
        let recs = vec![
            RawRecord::new(1, [("tags", "a|b")]),
            RawRecord::new(0, [("tags", "b|c")]),
        ];
        let map =
            FeatureMap::build(&recs, &[FieldDecl::new("tags", FieldKind::Set)], 0, 1).unwrap();
        let enc = map
            .encode(&RawRecord::new(0, [("tags", "c|zzz|a")]))
            .unwrap();
        assert_eq!(enc.values[0], vec![2, 3, 0]);
        assert_eq!(
            map.encode(&RawRecord::new(0, [("tags", "")]))
                .unwrap()
                .values[0],
            vec![3]
        );
    }

    #[test]
    fn build_errors() {
        let schema = table1_schema();
        assert!(matches!(
            FeatureMap::build(&[], &schema, 0, 1),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            FeatureMap::build(&table1(), &schema, 100, 1),
            Err(Error::EmptyField(name)) if name == "WEEKDAY"
        ));
    }

    #[test]
    fn map_file_round_trip() {
        let mut recs = table1();
        for (r, age) in recs.iter_mut().zip([12.5, 40.0, 19.0, 33.0]) {
            r.values.insert("age".into(), age.to_string());
        }
        let mut schema = table1_schema();
        schema.push(FieldDecl::new("age", FieldKind::Numerical));
        let map = FeatureMap::build(&recs, &schema, 0, 3).unwrap();
        let mut buf = Vec::new();
        map.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("FMAP v1 n=4 N="));
        assert!(text.contains("GENDER\t1\tMale\t1\n"));
        let back = FeatureMap::read(&buf[..]).unwrap();
        assert_eq!(back, map);
        for r in &recs {
            assert_eq!(back.encode(r).unwrap(), map.encode(r).unwrap());
        }
    }

    #[test]
    fn keep_probability_values() {
        assert!((negative_keep_probability(0.1, 0.5).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(negative_keep_probability(0.3, 0.3).unwrap(), 1.0);
        let p = negative_keep_probability(0.03, 0.5).unwrap();
        assert!((p - 0.03 / 0.97).abs() < 1e-15);
        assert!((p - 0.0309).abs() < 1e-4);
        assert!(negative_keep_probability(0.0, 0.5).is_err());
        assert!(negative_keep_probability(1.0, 0.5).is_err());
        assert!(negative_keep_probability(0.2, 1.0).is_err());
        // Already above target: keep everything.
        assert_eq!(negative_keep_probability(0.6, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn downsampling_hits_target_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Dataset::new(vec![2]);
        for _ in 0..100_000 {
            let label = u8::from(rng.gen::<f64>() < 0.1);
            data.push(&EncodedInstance {
                label,
                values: vec![vec![0]],
            })
            .unwrap();
        }
        let a = downsample_negatives(&data, 0.5, 11).unwrap();
        let b = downsample_negatives(&data, 0.5, 11).unwrap();
        assert_eq!(a, b);
        assert!(
            (a.positive_ratio() - 0.5).abs() < 0.02,
            "{}",
            a.positive_ratio()
        );
        let positives = (0..data.len()).filter(|&i| data.label(i) == 1).count();
        assert_eq!((0..a.len()).filter(|&i| a.label(i) == 1).count(), positives);
    }
}
