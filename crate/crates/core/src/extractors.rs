//! Product-layer feature extractors over per-field embeddings.
//!
//! Every extractor emits one entry (or one `d2`-block) per field pair
//! `(i, j)`, `i < j`, in lexicographic order. Each op comes in two forms:
//! a single-instance function over plain slices, and a batched builder that
//! records onto a [`Tape`]. The models use the tape forms; tests compare
//! them against the plain ones.

use crate::compute::ops::{self, Activation};
use crate::compute::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// All field pairs `(i, j)` with `i < j`, lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndex {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn new(n: usize) -> Self {
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
        PairIndex { n, pairs }
    }

    pub fn num_fields(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, (usize, usize))> + '_ {
        self.pairs.iter().copied().enumerate()
    }

    /// Position of pair `(i, j)`, `i < j`.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        if i >= j || j >= self.n {
            return None;
        }
        // pairs before row i: sum_{r<i} (n-1-r)
        Some(i * (2 * self.n - i - 1) / 2 + (j - i - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KernelMode {
    #[default]
    Matrix,
    Vector,
    Identity,
}

impl std::str::FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matrix" => Ok(KernelMode::Matrix),
            "vector" => Ok(KernelMode::Vector),
            "identity" => Ok(KernelMode::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel mode `{other}`"
            ))),
        }
    }
}

impl KernelMode {
    pub fn name(self) -> &'static str {
        match self {
            KernelMode::Matrix => "matrix",
            KernelMode::Vector => "vector",
            KernelMode::Identity => "identity",
        }
    }
}

/// One pair's kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// `k_i × k_j` matrix.
    Matrix(Tensor),
    /// Diagonal kernel of length `k`.
    Vector(Vec<f64>),
    Identity,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn require_equal_widths(emb: &[Vec<f64>]) -> Result<usize> {
    let k = emb.first().map_or(0, Vec::len);
    if emb.iter().any(|v| v.len() != k) {
        return Err(Error::Shape("extractor needs equal embedding sizes".into()));
    }
    Ok(k)
}

/// `pᵀ φ q`.
pub fn kernel_product(p: &[f64], phi: &Tensor, q: &[f64]) -> Result<f64> {
    if phi.rows() != p.len() || phi.cols() != q.len() {
        return Err(Error::Shape(format!(
            "kernel {:?} for vectors of length {} and {}",
            phi.shape(),
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .enumerate()
        .map(|(s, ps)| ps * dot(phi.row(s), q))
        .sum())
}

/// `⟨v_i, v_j⟩` for every pair.
pub fn inner_products(emb: &[Vec<f64>]) -> Result<Vec<f64>> {
    require_equal_widths(emb)?;
    let pairs = PairIndex::new(emb.len());
    Ok(pairs
        .pairs()
        .iter()
        .map(|&(i, j)| dot(&emb[i], &emb[j]))
        .collect())
}

/// Kernel products, one kernel per pair.
pub fn kernel_products(emb: &[Vec<f64>], kernels: &[Kernel]) -> Result<Vec<f64>> {
    let pairs = PairIndex::new(emb.len());
    if kernels.len() != pairs.len() {
        return Err(Error::Shape(format!(
            "{} kernels for {} pairs",
            kernels.len(),
            pairs.len()
        )));
    }
    pairs
        .pairs()
        .iter()
        .zip(kernels)
        .map(|(&(i, j), kernel)| {
            let (p, q) = (&emb[i], &emb[j]);
            match kernel {
                Kernel::Matrix(phi) => kernel_product(p, phi, q),
                Kernel::Vector(phi) => {
                    if phi.len() != p.len() || q.len() != p.len() {
                        return Err(Error::Shape("vector kernel needs equal sizes".into()));
                    }
                    Ok(p.iter().zip(phi).zip(q).map(|((a, f), b)| a * f * b).sum())
                }
                Kernel::Identity => {
                    if p.len() != q.len() {
                        return Err(Error::Shape("identity kernel needs equal sizes".into()));
                    }
                    Ok(dot(p, q))
                }
            }
        })
        .collect()
}

/// Kernel products between embeddings of different widths; kernel `(i, j)`
/// must be a `k_i × k_j` matrix.
pub fn kernel_products_adaptive(emb: &[Vec<f64>], kernels: &[Tensor]) -> Result<Vec<f64>> {
    let pairs = PairIndex::new(emb.len());
    if kernels.len() != pairs.len() {
        return Err(Error::Shape(format!(
            "{} kernels for {} pairs",
            kernels.len(),
            pairs.len()
        )));
    }
    pairs
        .pairs()
        .iter()
        .zip(kernels)
        .map(|(&(i, j), phi)| kernel_product(&emb[i], phi, &emb[j]))
        .collect()
}

/// Weights of one pair's micro network.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetWeights {
    /// `input × hidden`
    pub w1: Tensor,
    pub b1: Vec<f64>,
    /// `hidden × out`
    pub w2: Tensor,
    /// Absent for the bias-free scalar sub-networks of NIFM.
    pub b2: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroNetParams {
    /// One sub-network per pair, in pair order.
    pub subnets: Vec<SubnetWeights>,
    pub activation: Activation,
    /// Gain and shift (length `hidden`) of the pooled normalization applied
    /// to the hidden pre-activations of all pairs.
    pub fused_ln: Option<(Vec<f64>, Vec<f64>)>,
}

/// The input of a sub-network for pair `(p, q)`: `[p, q, p ⊙ q]`, or `[p, q]`
/// without the product term.
pub fn subnet_input(p: &[f64], q: &[f64], with_product: bool) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * p.len());
    x.extend_from_slice(p);
    x.extend_from_slice(q);
    if with_product {
        x.extend(p.iter().zip(q).map(|(a, b)| a * b));
    }
    x
}

fn run_subnets(
    emb: &[Vec<f64>],
    params: &MicroNetParams,
    with_product: bool,
) -> Result<Vec<Vec<f64>>> {
    require_equal_widths(emb)?;
    let pairs = PairIndex::new(emb.len());
    if params.subnets.len() != pairs.len() {
        return Err(Error::Shape(format!(
            "{} sub-networks for {} pairs",
            params.subnets.len(),
            pairs.len()
        )));
    }
    let mut pre = Vec::with_capacity(pairs.len());
    for (&(i, j), net) in pairs.pairs().iter().zip(&params.subnets) {
        let x = subnet_input(&emb[i], &emb[j], with_product);
        let w1: Vec<Vec<f64>> = (0..net.w1.rows()).map(|r| net.w1.row(r).to_vec()).collect();
        pre.push(ops::dense(&x, &w1, &net.b1, Activation::Identity)?);
    }
    let normalized = match &params.fused_ln {
        Some((gain, shift)) if !pre.is_empty() => ops::fused_layer_norm(&pre, gain, shift)?,
        _ => pre,
    };
    normalized
        .iter()
        .zip(&params.subnets)
        .map(|(h, net)| {
            let hidden: Vec<f64> = h.iter().map(|&v| params.activation.apply(v)).collect();
            let w2: Vec<Vec<f64>> = (0..net.w2.rows()).map(|r| net.w2.row(r).to_vec()).collect();
            let zero = vec![0.0; net.w2.cols()];
            ops::dense(
                &hidden,
                &w2,
                net.b2.as_deref().unwrap_or(&zero),
                Activation::Identity,
            )
        })
        .collect()
}

/// Micro-network products: per pair, `act(LN?([v_i, v_j, v_i ⊙ v_j]ᵀ W¹ + b¹))ᵀ W² + b²`.
/// Rows are pairs, columns the `d2` outputs.
pub fn micro_net_products(emb: &[Vec<f64>], params: &MicroNetParams) -> Result<Vec<Vec<f64>>> {
    run_subnets(emb, params, true)
}

/// NIFM pair scores: per pair, `act([v_i, v_j]ᵀ W¹ + b¹)ᵀ w²`, a scalar.
pub fn nifm_pair_scores(emb: &[Vec<f64>], params: &MicroNetParams) -> Result<Vec<f64>> {
    let out = run_subnets(emb, params, false)?;
    out.into_iter()
        .map(|row| match row.as_slice() {
            [s] => Ok(*s),
            _ => Err(Error::Shape(
                "NIFM sub-networks must have scalar output".into(),
            )),
        })
        .collect()
}

/// Attention network shared by all pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `k × h` projection.
    pub w: Tensor,
    pub b: Vec<f64>,
    /// Score vector of length `h`.
    pub score: Vec<f64>,
    pub temperature: f64,
}

/// Raw attention score of each pair, `scoreᵀ relu(Wᵀ(v_i ⊙ v_j) + b)`.
pub fn attention_scores(emb: &[Vec<f64>], params: &AttentionParams) -> Result<Vec<f64>> {
    let k = require_equal_widths(emb)?;
    if params.w.rows() != k
        || params.w.cols() != params.b.len()
        || params.score.len() != params.b.len()
    {
        return Err(Error::Shape(
            "attention weights do not match embedding size".into(),
        ));
    }
    let w: Vec<Vec<f64>> = (0..k).map(|r| params.w.row(r).to_vec()).collect();
    PairIndex::new(emb.len())
        .pairs()
        .iter()
        .map(|&(i, j)| {
            let e: Vec<f64> = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).collect();
            let h = ops::dense(&e, &w, &params.b, Activation::Relu)?;
            Ok(dot(&h, &params.score))
        })
        .collect()
}

/// `softmax(scores / t)`.
pub fn softmax_with_temperature(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let max = scores
        .iter()
        .fold(f64::NEG_INFINITY, |m, &s| m.max(s / temperature));
    let exps: Vec<f64> = scores
        .iter()
        .map(|&s| (s / temperature - max).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn attention_pair_weights(emb: &[Vec<f64>], params: &AttentionParams) -> Result<Vec<f64>> {
    softmax_with_temperature(&attention_scores(emb, params)?, params.temperature)
}

// ---------------------------------------------------------------------------
// Batched builders

/// Per-pair kernel as tape variables.
#[derive(Clone, Copy, Debug)]
pub enum KernelVar {
    Matrix(Var),
    /// `[1, k]`
    Vector(Var),
    Identity,
}

/// `[batch, P]` inner products.
pub fn tape_inner_products(tape: &mut Tape, emb: &[Var]) -> Result<Var> {
    let kernels = vec![KernelVar::Identity; PairIndex::new(emb.len()).len()];
    tape_kernel_products(tape, emb, &kernels)
}

/// `[batch, P]` kernel products.
pub fn tape_kernel_products(tape: &mut Tape, emb: &[Var], kernels: &[KernelVar]) -> Result<Var> {
    let pairs = PairIndex::new(emb.len());
    if kernels.len() != pairs.len() || pairs.is_empty() {
        return Err(Error::Shape(format!(
            "{} kernels for {} pairs",
            kernels.len(),
            pairs.len()
        )));
    }
    let mut cols = Vec::with_capacity(pairs.len());
    for (&(i, j), kernel) in pairs.pairs().iter().zip(kernels) {
        let left = match *kernel {
            KernelVar::Matrix(phi) => tape.matmul(emb[i], phi)?,
            KernelVar::Vector(phi) => tape.mul_row(emb[i], phi)?,
            KernelVar::Identity => emb[i],
        };
        let prod = tape.mul(left, emb[j])?;
        cols.push(tape.sum_cols(prod));
    }
    tape.concat(&cols)
}

/// One pair's sub-network as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct SubnetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Option<Var>,
}

/// `[batch, P · d2]` micro-network outputs, pair-major.
pub fn tape_micro_net(
    tape: &mut Tape,
    emb: &[Var],
    subnets: &[SubnetVars],
    activation: Activation,
    fused_ln: Option<(Var, Var)>,
    with_product: bool,
) -> Result<Var> {
    let pairs = PairIndex::new(emb.len());
    if subnets.len() != pairs.len() || pairs.is_empty() {
        return Err(Error::Shape(format!(
            "{} sub-networks for {} pairs",
            subnets.len(),
            pairs.len()
        )));
    }
    let mut pre = Vec::with_capacity(pairs.len());
    for (&(i, j), net) in pairs.pairs().iter().zip(subnets) {
        let x = if with_product {
            let prod = tape.mul(emb[i], emb[j])?;
            tape.concat(&[emb[i], emb[j], prod])?
        } else {
            tape.concat(&[emb[i], emb[j]])?
        };
        let h = tape.matmul(x, net.w1)?;
        pre.push(tape.add_row(h, net.b1)?);
    }
    let hidden: Vec<Var> = match fused_ln {
        Some((gain, shift)) => {
            let width = tape.value(pre[0]).cols();
            let all = tape.concat(&pre)?;
            let normed = tape.normalize(all, gain, shift, pre.len())?;
            let act = tape.activation(normed, activation);
            (0..pre.len())
                .map(|p| tape.slice_cols(act, p * width, width))
                .collect::<Result<_>>()?
        }
        None => pre
            .iter()
            .map(|&h| tape.activation(h, activation))
            .collect(),
    };
    let mut outs = Vec::with_capacity(pairs.len());
    for (h, net) in hidden.into_iter().zip(subnets) {
        let o = tape.matmul(h, net.w2)?;
        outs.push(match net.b2 {
            Some(b2) => tape.add_row(o, b2)?,
            None => o,
        });
    }
    tape.concat(&outs)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w: Var,
    pub b: Var,
    /// `[h, 1]`
    pub score: Var,
    pub temperature: f64,
}

/// Attention-weighted interaction: returns `(weights [batch, P],
/// Σ_p weight_p · ⟨v_i, v_j⟩ as [batch, 1])`.
pub fn tape_attention(tape: &mut Tape, emb: &[Var], att: &AttentionVars) -> Result<(Var, Var)> {
    let pairs = PairIndex::new(emb.len());
    if pairs.is_empty() {
        return Err(Error::Shape("attention needs at least two fields".into()));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    let mut inners = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs.pairs() {
        let e = tape.mul(emb[i], emb[j])?;
        inners.push(tape.sum_cols(e));
        let h = tape.matmul(e, att.w)?;
        let h = tape.add_row(h, att.b)?;
        let h = tape.activation(h, Activation::Relu);
        scores.push(tape.matmul(h, att.score)?);
    }
    let scores = tape.concat(&scores)?;
    let weights = tape.softmax_rows(scores, att.temperature)?;
    let inners = tape.concat(&inners)?;
    let weighted = tape.mul(weights, inners)?;
    Ok((weights, tape.sum_cols(weighted)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, rand_vec(rng, r * c)).unwrap()
    }

    #[test]
    fn pair_index_order() {
        let p = PairIndex::new(4);
        assert_eq!(p.pairs(), &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        for (pos, (i, j)) in p.iter() {
            assert_eq!(p.position(i, j), Some(pos));
        }
        assert_eq!(p.position(2, 1), None);
        assert!(PairIndex::new(1).is_empty());
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(
            inner_products(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.0]
        );
        assert_eq!(
            inner_products(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            vec![2.0]
        );
        assert_eq!(
            inner_products(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            vec![0.0, 1.0, 1.0]
        );
        assert!(inner_products(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn kernel_product_examples() {
        let emb = [vec![1.0, 2.0], vec![3.0, 4.0]];
        let swap = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            kernel_products(&emb, &[Kernel::Matrix(swap)]).unwrap(),
            vec![10.0]
        );
        assert_eq!(
            kernel_products(&emb, &[Kernel::Matrix(Tensor::identity(2))]).unwrap(),
            vec![11.0]
        );
        assert_eq!(
            kernel_products(&emb, &[Kernel::Identity]).unwrap(),
            vec![11.0]
        );
        assert_eq!(
            kernel_products(&emb, &[Kernel::Vector(vec![2.0, 3.0])]).unwrap(),
            vec![30.0]
        );
        assert!(kernel_products(&emb, &[Kernel::Matrix(Tensor::zeros(3, 2))]).is_err());
        assert!(kernel_products(&emb, &[]).is_err());
    }

    #[test]
    fn adaptive_kernel_examples() {
        let emb = [vec![2.0], vec![1.0, 1.0]];
        let phi = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert_eq!(kernel_products_adaptive(&emb, &[phi]).unwrap(), vec![0.0]);
        assert_eq!(
            kernel_products_adaptive(&emb, &[Tensor::zeros(1, 2)]).unwrap(),
            vec![0.0]
        );
        assert!(kernel_products_adaptive(&emb, &[Tensor::zeros(2, 1)]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb: Vec<_> = (0..3).map(|_| rand_vec(&mut rng, 3)).collect();
        let ks: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, 3, 3)).collect();
        let a = kernel_products_adaptive(&emb, &ks).unwrap();
        let b = kernel_products(
            &emb,
            &ks.iter().cloned().map(Kernel::Matrix).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn identity_kernel_equals_inner_product(seed in any::<u64>(), n in 2usize..6, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb: Vec<_> = (0..n).map(|_| rand_vec(&mut rng, k)).collect();
            let pairs = PairIndex::new(n).len();
            let ks = vec![Kernel::Matrix(Tensor::identity(k)); pairs];
            let a = kernel_products(&emb, &ks).unwrap();
            let b = inner_products(&emb).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn vector_kernel_equals_diagonal_matrix(seed in any::<u64>(), n in 2usize..6, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb: Vec<_> = (0..n).map(|_| rand_vec(&mut rng, k)).collect();
            let pairs = PairIndex::new(n).len();
            let diags: Vec<_> = (0..pairs).map(|_| rand_vec(&mut rng, k)).collect();
            let vec_k: Vec<_> = diags.iter().cloned().map(Kernel::Vector).collect();
            let mat_k: Vec<_> = diags.iter().map(|d| {
                let mut m = Tensor::zeros(k, k);
                for (s, v) in d.iter().enumerate() { m.set(s, s, *v); }
                Kernel::Matrix(m)
            }).collect();
            let a = kernel_products(&emb, &vec_k).unwrap();
            let b = kernel_products(&emb, &mat_k).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn kernel_product_is_convolution_sum_of_outer_product(seed in any::<u64>(), k1 in 1usize..6, k2 in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_vec(&mut rng, k1);
            let q = rand_vec(&mut rng, k2);
            let phi = rand_tensor(&mut rng, k1, k2);
            let mut conv = 0.0;
            for s in 0..k1 {
                for t in 0..k2 {
                    conv += (p[s] * q[t]) * phi.get(s, t);
                }
            }
            prop_assert!((conv - kernel_product(&p, &phi, &q).unwrap()).abs() <= 1e-12);
        }
    }

    fn zero_subnets(
        pairs: usize,
        input: usize,
        hidden: usize,
        out: usize,
        bias: bool,
    ) -> Vec<SubnetWeights> {
        (0..pairs)
            .map(|_| SubnetWeights {
                w1: Tensor::zeros(input, hidden),
                b1: vec![0.0; hidden],
                w2: Tensor::zeros(hidden, out),
                b2: bias.then(|| vec![0.0; out]),
            })
            .collect()
    }

    #[test]
    fn micro_net_examples() {
        let emb: Vec<_> = (0..4).map(|i| vec![i as f64 + 0.5; 2]).collect();
        let params = MicroNetParams {
            subnets: zero_subnets(6, 6, 3, 5, true),
            activation: Activation::Tanh,
            fused_ln: None,
        };
        let out = micro_net_products(&emb, &params).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out
            .iter()
            .all(|r| r.len() == 5 && r.iter().all(|&v| v == 0.0)));
        assert_eq!(subnet_input(&[2.0], &[3.0], true), vec![2.0, 3.0, 6.0]);
    }

    #[test]
    fn nifm_examples() {
        let emb = vec![vec![1.0], vec![2.0]];
        let mut params = MicroNetParams {
            subnets: zero_subnets(1, 2, 1, 1, false),
            activation: Activation::Tanh,
            fused_ln: None,
        };
        assert_eq!(nifm_pair_scores(&emb, &params).unwrap(), vec![0.0]);
        params.subnets[0].w2 = Tensor::scalar(5.0);
        assert_eq!(nifm_pair_scores(&emb, &params).unwrap(), vec![0.0]);
        params.subnets[0].w1 = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        params.subnets[0].w2 = Tensor::scalar(2.0);
        params.activation = Activation::Identity;
        assert_eq!(nifm_pair_scores(&emb, &params).unwrap(), vec![6.0]);
    }

    #[test]
    fn attention_examples() {
        assert_eq!(
            softmax_with_temperature(&[0.0, 2f64.ln(), 0.0], 1.0).unwrap(),
            vec![0.25, 0.5, 0.25]
        );
        let w = softmax_with_temperature(&[0.7; 6], 0.3).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        let w = softmax_with_temperature(&[1.0, -2.0, 3.0], 1e9).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-8));
        assert!(softmax_with_temperature(&[1.0], 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let emb: Vec<_> = (0..5).map(|_| rand_vec(&mut rng, 3)).collect();
        let params = AttentionParams {
            w: rand_tensor(&mut rng, 3, 4),
            b: rand_vec(&mut rng, 4),
            score: rand_vec(&mut rng, 4),
            temperature: 0.5,
        };
        let w = attention_pair_weights(&emb, &params).unwrap();
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Build random extractor parameters in a store and check the batched
    /// builders against the single-instance functions.
    #[test]
    fn tape_builders_match_single_instance_functions() {
        let (n, k, h, d2, batch) = (4, 3, 5, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pairs = PairIndex::new(n);
        let mut store = ParamStore::new();
        let kernels: Vec<_> = (0..pairs.len())
            .map(|p| {
                if p % 2 == 0 {
                    store.insert(format!("k{p}"), rand_tensor(&mut rng, k, k), false)
                } else {
                    store.insert(format!("k{p}"), rand_tensor(&mut rng, 1, k), false)
                }
            })
            .collect();
        let subnets: Vec<_> = (0..pairs.len())
            .map(|p| {
                (
                    store.insert(format!("s{p}.w1"), rand_tensor(&mut rng, 3 * k, h), false),
                    store.insert(format!("s{p}.b1"), rand_tensor(&mut rng, 1, h), false),
                    store.insert(format!("s{p}.w2"), rand_tensor(&mut rng, h, d2), false),
                    store.insert(format!("s{p}.b2"), rand_tensor(&mut rng, 1, d2), false),
                )
            })
            .collect();
        let gain = store.insert("g", rand_tensor(&mut rng, 1, h), false);
        let shift = store.insert("s", rand_tensor(&mut rng, 1, h), false);
        let aw = store.insert("aw", rand_tensor(&mut rng, k, h), false);
        let ab = store.insert("ab", rand_tensor(&mut rng, 1, h), false);
        let ascore = store.insert("as", rand_tensor(&mut rng, h, 1), false);
        let embs: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut rng, batch, k)).collect();

        let mut tape = Tape::new(&store);
        let ev: Vec<Var> = embs.iter().map(|e| tape.input(e.clone())).collect();
        let ip = tape_inner_products(&mut tape, &ev).unwrap();
        let kvars: Vec<_> = kernels
            .iter()
            .enumerate()
            .map(|(p, &id)| {
                let v = tape.param(id);
                if p % 2 == 0 {
                    KernelVar::Matrix(v)
                } else {
                    KernelVar::Vector(v)
                }
            })
            .collect();
        let kp = tape_kernel_products(&mut tape, &ev, &kvars).unwrap();
        let svars: Vec<_> = subnets
            .iter()
            .map(|&(w1, b1, w2, b2)| SubnetVars {
                w1: tape.param(w1),
                b1: tape.param(b1),
                w2: tape.param(w2),
                b2: Some(tape.param(b2)),
            })
            .collect();
        let (g, s) = (tape.param(gain), tape.param(shift));
        let mn =
            tape_micro_net(&mut tape, &ev, &svars, Activation::Tanh, Some((g, s)), true).unwrap();
        let att = AttentionVars {
            w: tape.param(aw),
            b: tape.param(ab),
            score: tape.param(ascore),
            temperature: 0.7,
        };
        let (aw_var, _) = tape_attention(&mut tape, &ev, &att).unwrap();

        let plain_kernels: Vec<Kernel> = kernels
            .iter()
            .enumerate()
            .map(|(p, &id)| {
                if p % 2 == 0 {
                    Kernel::Matrix(store.get(id).clone())
                } else {
                    Kernel::Vector(store.get(id).data().to_vec())
                }
            })
            .collect();
        let micro = MicroNetParams {
            subnets: subnets
                .iter()
                .map(|&(w1, b1, w2, b2)| SubnetWeights {
                    w1: store.get(w1).clone(),
                    b1: store.get(b1).data().to_vec(),
                    w2: store.get(w2).clone(),
                    b2: Some(store.get(b2).data().to_vec()),
                })
                .collect(),
            activation: Activation::Tanh,
            fused_ln: Some((
                store.get(gain).data().to_vec(),
                store.get(shift).data().to_vec(),
            )),
        };
        let attention = AttentionParams {
            w: store.get(aw).clone(),
            b: store.get(ab).data().to_vec(),
            score: store.get(ascore).data().to_vec(),
            temperature: 0.7,
        };
        for b in 0..batch {
            let emb: Vec<Vec<f64>> = embs.iter().map(|e| e.row(b).to_vec()).collect();
            let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(a, c)| (a - c).abs() < 1e-12);
            assert!(close(tape.value(ip).row(b), &inner_products(&emb).unwrap()));
            assert!(close(
                tape.value(kp).row(b),
                &kernel_products(&emb, &plain_kernels).unwrap()
            ));
            let flat: Vec<f64> = micro_net_products(&emb, &micro).unwrap().concat();
            assert!(close(tape.value(mn).row(b), &flat));
            assert!(close(
                tape.value(aw_var).row(b),
                &attention_pair_weights(&emb, &attention).unwrap()
            ));
        }
    }
}
