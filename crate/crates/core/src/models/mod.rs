//! The model families as logit-producing compositions of embeddings,
//! product extractors and a feed-forward classifier.

mod forward;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::params::{read_checkpoint, write_checkpoint, CheckpointHeader};
use crate::compute::{
    grad_check, Activation, EmbeddingSizes, GradCheckReport, ParamId, ParamStore, Tensor,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::extractors::{KernelMode, PairIndex};

pub(crate) use forward::count_rows;
pub use forward::{LossOutput, Mode, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Lr,
    Fm,
    Ffm,
    Afm,
    Kfm,
    Nifm,
    Fnn,
    DeepFm,
    Ipnn,
    Kpnn,
    Pin,
    /// Linear terms plus one free weight per cross category.
    Poly2,
}

impl Family {
    pub const ALL: [Family; 12] = [
        Family::Lr,
        Family::Fm,
        Family::Ffm,
        Family::Afm,
        Family::Kfm,
        Family::Nifm,
        Family::Fnn,
        Family::DeepFm,
        Family::Ipnn,
        Family::Kpnn,
        Family::Pin,
        Family::Poly2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Lr => "lr",
            Family::Fm => "fm",
            Family::Ffm => "ffm",
            Family::Afm => "afm",
            Family::Kfm => "kfm",
            Family::Nifm => "nifm",
            Family::Fnn => "fnn",
            Family::DeepFm => "deepfm",
            Family::Ipnn => "ipnn",
            Family::Kpnn => "kpnn",
            Family::Pin => "pin",
            Family::Poly2 => "poly2",
        }
    }

    pub fn has_linear(self) -> bool {
        matches!(
            self,
            Family::Lr
                | Family::Fm
                | Family::Ffm
                | Family::Afm
                | Family::Kfm
                | Family::Nifm
                | Family::DeepFm
                | Family::Poly2
        )
    }

    pub fn has_embeddings(self) -> bool {
        !matches!(self, Family::Lr | Family::Ffm | Family::Poly2)
    }

    pub fn has_dnn(self) -> bool {
        matches!(
            self,
            Family::Fnn | Family::DeepFm | Family::Ipnn | Family::Kpnn | Family::Pin
        )
    }

    pub fn has_kernels(self) -> bool {
        matches!(self, Family::Kfm | Family::Kpnn)
    }

    pub fn has_subnets(self) -> bool {
        matches!(self, Family::Nifm | Family::Pin)
    }

    fn uses_pairs(self) -> bool {
        !matches!(self, Family::Lr | Family::Fnn)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model family `{s}`")))
    }
}

/// Sub-network shape `[hidden, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubnetSpec {
    pub hidden: usize,
    pub out: usize,
}

impl Default for SubnetSpec {
    fn default() -> Self {
        SubnetSpec { hidden: 40, out: 5 }
    }
}

impl FromStr for SubnetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad =
            || Error::InvalidArgument(format!("sub-network spec `{s}` is not `[hidden,out]`"));
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(bad)?;
        let (h, o) = inner.split_once(',').ok_or_else(bad)?;
        let hidden: usize = h.trim().parse().map_err(|_| bad())?;
        let out: usize = o.trim().parse().map_err(|_| bad())?;
        if hidden == 0 || out == 0 {
            return Err(bad());
        }
        Ok(SubnetSpec { hidden, out })
    }
}

impl fmt::Display for SubnetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.hidden, self.out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub hidden: usize,
    pub temperature: f64,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        AttentionSpec {
            hidden: 16,
            temperature: 1.0,
        }
    }
}

/// Denominator of the uniform embedding bound `sqrt(c / ·)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitScale {
    /// `N · k`, total categories times width.
    Total,
    /// `n · k`, fields times width.
    #[default]
    Fields,
    /// `k`.
    Width,
}

impl FromStr for InitScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(InitScale::Total),
            "fields" => Ok(InitScale::Fields),
            "width" => Ok(InitScale::Width),
            _ => Err(Error::InvalidArgument(format!("unknown init scale `{s}`"))),
        }
    }
}

impl InitScale {
    pub fn name(self) -> &'static str {
        match self {
            InitScale::Total => "total",
            InitScale::Fields => "fields",
            InitScale::Width => "width",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub embedding: EmbeddingSizes,
    /// Hidden widths of the classifier; the output unit is implicit.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    pub dropout: f64,
    pub subnet: SubnetSpec,
    pub subnet_activation: Activation,
    pub kernel_mode: KernelMode,
    pub attention: AttentionSpec,
    pub init_scale: InitScale,
    /// `c` in the embedding bound, one of 1, 3, 6.
    pub init_c: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            family: Family::Fm,
            embedding: EmbeddingSizes::Fixed(10),
            hidden: Vec::new(),
            activation: Activation::Relu,
            layer_norm: false,
            dropout: 0.0,
            subnet: SubnetSpec::default(),
            subnet_activation: Activation::Tanh,
            kernel_mode: KernelMode::Matrix,
            attention: AttentionSpec::default(),
            init_scale: InitScale::default(),
            init_c: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        ModelSpec {
            family,
            ..ModelSpec::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Rectangular identity.
    Eye,
    Xavier,
    Uniform(f64),
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    rows: usize,
    cols: usize,
    sparse: bool,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SubnetIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIds {
    pub w: ParamId,
    pub b: ParamId,
    pub ln: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Layout {
    pub linear: Vec<ParamId>,
    pub bias: Option<ParamId>,
    pub embed: Vec<ParamId>,
    pub ffm: Vec<ParamId>,
    pub poly2: Vec<ParamId>,
    pub kernels: Vec<ParamId>,
    pub attention: Option<(ParamId, ParamId, ParamId)>,
    pub subnets: Vec<SubnetIds>,
    pub subnet_ln: Option<(ParamId, ParamId)>,
    pub product_ln: Option<(ParamId, ParamId)>,
    pub dnn: Vec<LayerIds>,
    pub dnn_out: Option<(ParamId, ParamId)>,
}

/// A model architecture bound to a set of field sizes. Parameters live in a
/// separate [`ParamStore`] created by [`Model::init_params`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    field_sizes: Vec<usize>,
    widths: Vec<usize>,
    pairs: PairIndex,
    slots: Vec<Slot>,
    layout: Layout,
}

struct Builder {
    slots: Vec<Slot>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, sparse: bool, init: Init) -> ParamId {
        self.slots.push(Slot {
            name,
            rows,
            cols,
            sparse,
            init,
        });
        ParamId(self.slots.len() - 1)
    }
}

impl Model {
    pub fn new(spec: ModelSpec, field_sizes: &[usize]) -> Result<Self> {
        let n = field_sizes.len();
        let family = spec.family;
        if n == 0 {
            return Err(Error::InvalidArgument(
                "model needs at least one field".into(),
            ));
        }
        if let Some(i) = field_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "field {i} has no categories"
            )));
        }
        if family.uses_pairs() && n < 2 {
            return Err(Error::InvalidArgument(format!(
                "{family} needs at least two fields"
            )));
        }
        ops_check_rate(spec.dropout)?;
        if spec.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden layer widths must be positive".into(),
            ));
        }
        if family == Family::Afm
            && (spec.attention.hidden == 0
                || !(spec.attention.temperature > 0.0 && spec.attention.temperature.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "attention needs h >= 1 and temperature t > 0".into(),
            ));
        }
        if family.has_subnets() && (spec.subnet.hidden == 0 || spec.subnet.out == 0) {
            return Err(Error::InvalidArgument(
                "sub-network widths must be positive".into(),
            ));
        }

        let widths = if family == Family::Lr || family == Family::Poly2 {
            Vec::new()
        } else {
            spec.embedding.widths(field_sizes)?
        };
        let fixed = widths.windows(2).all(|w| w[0] == w[1]);
        let adaptive_ok = match family {
            Family::Lr | Family::Poly2 | Family::Fnn => true,
            Family::Kfm | Family::Kpnn => spec.kernel_mode == KernelMode::Matrix,
            _ => false,
        };
        if !fixed && !adaptive_ok {
            return Err(Error::InvalidArgument(format!(
                "{family} with kernel mode {} needs equal embedding sizes",
                spec.kernel_mode.name()
            )));
        }

        let pairs = PairIndex::new(n);
        let total: usize = field_sizes.iter().sum();
        let emb_bound = |k: usize| {
            let denom = match spec.init_scale {
                InitScale::Total => (total * k) as f64,
                InitScale::Fields => (n * k) as f64,
                InitScale::Width => k as f64,
            };
            (spec.init_c / denom).sqrt()
        };

        let mut b = Builder { slots: Vec::new() };
        let mut layout = Layout::default();
        if family.has_linear() {
            for (i, &size) in field_sizes.iter().enumerate() {
                layout
                    .linear
                    .push(b.add(format!("linear.{i}"), size, 1, true, Init::Zeros));
            }
            layout.bias = Some(b.add("bias".into(), 1, 1, false, Init::Zeros));
        }
        if family.has_embeddings() {
            for (i, (&size, &k)) in field_sizes.iter().zip(&widths).enumerate() {
                layout.embed.push(b.add(
                    format!("embed.{i}"),
                    size,
                    k,
                    true,
                    Init::Uniform(emb_bound(k)),
                ));
            }
        }
        if family == Family::Ffm {
            let k = widths[0];
            for (i, &size) in field_sizes.iter().enumerate() {
                layout.ffm.push(b.add(
                    format!("ffm.{i}"),
                    size,
                    (n - 1) * k,
                    true,
                    Init::Uniform(emb_bound(k)),
                ));
            }
        }
        if family == Family::Poly2 {
            for &(i, j) in pairs.pairs() {
                layout.poly2.push(b.add(
                    format!("poly2.{i}.{j}"),
                    field_sizes[i] * field_sizes[j],
                    1,
                    true,
                    Init::Zeros,
                ));
            }
        }
        if family.has_kernels() {
            for &(i, j) in pairs.pairs() {
                let name = format!("kernel.{i}.{j}");
                match spec.kernel_mode {
                    KernelMode::Matrix => {
                        layout
                            .kernels
                            .push(b.add(name, widths[i], widths[j], false, Init::Eye))
                    }
                    KernelMode::Vector => {
                        layout
                            .kernels
                            .push(b.add(name, 1, widths[i], false, Init::Ones))
                    }
                    KernelMode::Identity => {}
                }
            }
        }
        if family == Family::Afm {
            let h = spec.attention.hidden;
            layout.attention = Some((
                b.add("attn.w".into(), widths[0], h, false, Init::Xavier),
                b.add("attn.b".into(), 1, h, false, Init::Zeros),
                b.add("attn.h".into(), h, 1, false, Init::Xavier),
            ));
        }
        if family.has_subnets() {
            let k = widths[0];
            let (input, out, with_b2) = if family == Family::Pin {
                (3 * k, spec.subnet.out, true)
            } else {
                (2 * k, 1, false)
            };
            let h = spec.subnet.hidden;
            for &(i, j) in pairs.pairs() {
                let p = format!("subnet.{i}.{j}");
                layout.subnets.push(SubnetIds {
                    w1: b.add(format!("{p}.w1"), input, h, false, Init::Xavier),
                    b1: b.add(format!("{p}.b1"), 1, h, false, Init::Zeros),
                    w2: b.add(format!("{p}.w2"), h, out, false, Init::Xavier),
                    b2: with_b2.then(|| b.add(format!("{p}.b2"), 1, out, false, Init::Zeros)),
                });
            }
            if family == Family::Pin && spec.layer_norm {
                layout.subnet_ln = Some((
                    b.add("subnet.ln.gain".into(), 1, h, false, Init::Ones),
                    b.add("subnet.ln.shift".into(), 1, h, false, Init::Zeros),
                ));
            }
        }
        if matches!(family, Family::Ipnn | Family::Kpnn) && spec.layer_norm {
            layout.product_ln = Some((
                b.add("product.ln.gain".into(), 1, pairs.len(), false, Init::Ones),
                b.add(
                    "product.ln.shift".into(),
                    1,
                    pairs.len(),
                    false,
                    Init::Zeros,
                ),
            ));
        }
        if family.has_dnn() {
            let emb_width: usize = widths.iter().sum();
            let mut width = match family {
                Family::Fnn | Family::DeepFm => emb_width,
                Family::Ipnn | Family::Kpnn => emb_width + pairs.len(),
                _ => pairs.len() * spec.subnet.out,
            };
            for (l, &h) in spec.hidden.iter().enumerate() {
                let w = b.add(format!("dnn.{l}.w"), width, h, false, Init::Xavier);
                let bias = b.add(format!("dnn.{l}.b"), 1, h, false, Init::Zeros);
                let ln = spec.layer_norm.then(|| {
                    (
                        b.add(format!("dnn.{l}.ln.gain"), 1, h, false, Init::Ones),
                        b.add(format!("dnn.{l}.ln.shift"), 1, h, false, Init::Zeros),
                    )
                });
                layout.dnn.push(LayerIds { w, b: bias, ln });
                width = h;
            }
            layout.dnn_out = Some((
                b.add("dnn.out.w".into(), width, 1, false, Init::Xavier),
                b.add("dnn.out.b".into(), 1, 1, false, Init::Zeros),
            ));
        }

        Ok(Model {
            spec,
            field_sizes: field_sizes.to_vec(),
            widths,
            pairs,
            slots: b.slots,
            layout,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn field_sizes(&self) -> &[usize] {
        &self.field_sizes
    }

    pub fn num_fields(&self) -> usize {
        self.field_sizes.len()
    }

    /// Per-field embedding widths; empty for families without embeddings.
    pub fn embedding_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn pairs(&self) -> &PairIndex {
        &self.pairs
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for slot in &self.slots {
            let (r, c) = (slot.rows, slot.cols);
            let value = match slot.init {
                Init::Zeros => Tensor::zeros(r, c),
                Init::Ones => Tensor::filled(r, c, 1.0),
                Init::Eye => {
                    let mut t = Tensor::zeros(r, c);
                    for d in 0..r.min(c) {
                        t.set(d, d, 1.0);
                    }
                    t
                }
                Init::Xavier => uniform(&mut rng, r, c, (6.0 / (r + c) as f64).sqrt()),
                Init::Uniform(bound) => uniform(&mut rng, r, c, bound),
            };
            store.insert(slot.name.clone(), value, slot.sparse);
        }
        store
    }

    pub fn save_checkpoint<W: Write>(
        &self,
        w: W,
        params: &ParamStore,
        seed: Option<u64>,
    ) -> Result<()> {
        let header = CheckpointHeader {
            model: self.family().name().to_string(),
            n_fields: self.num_fields(),
            seed,
        };
        write_checkpoint(w, &header, params).map_err(|e| Error::io("checkpoint", e))
    }

    /// Read a checkpoint written for this architecture.
    pub fn load_checkpoint<R: BufRead>(&self, r: R) -> Result<(ParamStore, CheckpointHeader)> {
        let (header, tensors) = read_checkpoint(r)?;
        if header.model != self.family().name() {
            return Err(Error::Shape(format!(
                "checkpoint holds a {} model, expected {}",
                header.model,
                self.family()
            )));
        }
        if header.n_fields != self.num_fields() {
            return Err(Error::Shape(format!(
                "checkpoint has n={}, expected {}",
                header.n_fields,
                self.num_fields()
            )));
        }
        let mut store = self.init_params(0);
        store.load_values(tensors)?;
        Ok((store, header))
    }
}

fn ops_check_rate(rate: f64) -> Result<()> {
    crate::compute::ops::check_dropout_rate(rate)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

/// Overwrite every parameter with uniform values in `[-scale, scale]`.
pub fn randomize_params(params: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
    }
}

/// Central-difference check of the mean-log-loss gradient on `batch`.
pub fn check_gradients<N: Network>(
    model: &N,
    params: &ParamStore,
    batch: &Batch,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    grad_check(
        params,
        |p| {
            let out = Network::loss_and_grad(model, p, batch, Mode::Eval)?;
            Ok((out.loss, out.grads))
        },
        h,
        tolerance,
    )
}

/// Fresh parameters for `target` whose embedding tables are copied from a
/// trained FM.
pub fn pretrain_embeddings(fm: &ParamStore, target: &Model, seed: u64) -> Result<ParamStore> {
    let mut params = target.init_params(seed);
    if target.layout.embed.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no embedding tables to initialize",
            target.family()
        )));
    }
    for &id in &target.layout.embed {
        let name = params.param(id).name.clone();
        let src = fm
            .by_name(&name)
            .ok_or_else(|| Error::Shape(format!("pre-trained model has no `{name}`")))?;
        let dst = params.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::Shape(format!(
                "`{name}` is {:?} in the pre-trained model, target expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(params)
}
