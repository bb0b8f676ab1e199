//! Per-batch similarity graphs and topology-adaptive graph convolution.
//!
//! Every mini-batch becomes one graph whose nodes are the samples. Edges
//! come from cosine similarity of the node features, kept only for the
//! `k` strongest neighbours of each node, then symmetrically normalized so
//! that the propagation matrix has spectral radius at most one.

use std::fmt::Write as _;

use rand::Rng;

use crate::diff::{xavier_init_with_fans, DiffArray, Fans, Scalar};
use crate::error::{Error, Result};
use crate::layers::BatchNorm;

/// Default neighbour count `max(2, ceil(n / 10))` for an `n`-node graph.
pub fn default_topk(nodes: usize) -> usize {
    nodes.div_ceil(10).max(2)
}

/// Cosine-similarity adjacency of the rows of `features` (`[n, d]`).
///
/// Rows are L2-normalized before the inner products. The diagonal is
/// exactly 1 (zero rows included) and carries no gradient; off-diagonal
/// entries are clamped into `[-1, 1]`.
pub fn build_adjacency<T: Scalar>(features: &DiffArray<T>) -> Result<DiffArray<T>> {
    let n = match *features.shape() {
        [n, d] if n >= 1 && d >= 1 => n,
        _ => {
            return Err(Error::invalid(
                "build_adjacency",
                format!("expected non-empty [n, d] features, got {:?}", features.shape()),
            ))
        }
    };
    features.ensure_finite("build_adjacency")?;
    let unit = features.l2_normalize_rows()?;
    let gram = unit.matmul(&unit.transpose()?)?;
    let mut off_diag = vec![T::one(); n * n];
    let mut eye = vec![T::zero(); n * n];
    for i in 0..n {
        off_diag[i * n + i] = T::zero();
        eye[i * n + i] = T::one();
    }
    gram.mul(&DiffArray::new(&[n, n], off_diag)?)?
        .clamp(-T::one(), T::one())?
        .add(&DiffArray::new(&[n, n], eye)?)
}

/// Row-wise keep-mask of the `min(k, n)` largest entries of an `[n, n]`
/// matrix. Ties prefer the diagonal entry, then the lower column index.
pub fn topk_mask<T: Scalar>(values: &[T], n: usize, k: usize) -> Vec<T> {
    let keep = k.min(n);
    let mut mask = vec![T::zero(); n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let row = &values[i * n..(i + 1) * n];
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| (b == i).cmp(&(a == i)))
                .then_with(|| a.cmp(&b))
        });
        for &j in &order[..keep] {
            mask[i * n + j] = T::one();
        }
    }
    mask
}

/// Keeps the `k` largest entries of every row of `adjacency` and zeroes
/// the rest. The selection is a constant mask for differentiation.
pub fn topk_sparsify<T: Scalar>(adjacency: &DiffArray<T>, k: usize) -> Result<DiffArray<T>> {
    let n = square_dim("topk_sparsify", adjacency)?;
    if k == 0 {
        return Err(Error::invalid("topk_sparsify", "k must be at least 1"));
    }
    let mask = topk_mask(&adjacency.data(), n, k);
    adjacency.mul(&DiffArray::new(&[n, n], mask)?)
}

/// `D^{-1/2} S D^{-1/2}` with `S = (relu(Â) + relu(Â)ᵀ) / 2` and `D` the
/// row sums of `S`.
pub fn normalize_adjacency<T: Scalar>(sparse: &DiffArray<T>) -> Result<DiffArray<T>> {
    square_dim("normalize_adjacency", sparse)?;
    let clamped = sparse.relu()?;
    let sym = clamped.add(&clamped.transpose()?)?.scale(T::lit(0.5))?;
    let degree = sym.sum_rows()?;
    if let Some(i) = degree.data().iter().position(|&d| d <= T::zero()) {
        return Err(Error::invalid(
            "normalize_adjacency",
            format!("node {i} has zero degree"),
        ));
    }
    let inv_sqrt = degree.powf(T::lit(-0.5))?;
    sym.scale_rows(&inv_sqrt)?.scale_cols(&inv_sqrt)
}

fn square_dim<T: Scalar>(op: &'static str, a: &DiffArray<T>) -> Result<usize> {
    match *a.shape() {
        [n, m] if n == m => Ok(n),
        _ => Err(Error::invalid(op, format!("expected a square matrix, got {:?}", a.shape()))),
    }
}

/// Graph of one mini-batch at each construction stage.
#[derive(Debug, Clone)]
pub struct GraphBatch<T: Scalar> {
    pub features: DiffArray<T>,
    pub adjacency: DiffArray<T>,
    pub sparse: DiffArray<T>,
    pub normalized: DiffArray<T>,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn build(features: &DiffArray<T>, k: usize) -> Result<Self> {
        let adjacency = build_adjacency(features)?;
        let sparse = topk_sparsify(&adjacency, k)?;
        let normalized = normalize_adjacency(&sparse)?;
        Ok(Self {
            features: features.clone(),
            adjacency,
            sparse,
            normalized,
        })
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    /// Nonzero entries of the sparsified adjacency as `row col weight` lines.
    pub fn sparse_coo(&self) -> String {
        let n = self.nodes();
        let a = self.sparse.data();
        let mut out = String::new();
        for i in 0..n {
            for j in 0..n {
                let w = a[i * n + j];
                if w != T::zero() {
                    let _ = writeln!(out, "{i} {j} {w}");
                }
            }
        }
        out
    }
}

/// Polynomial graph filter `Y = Σ_k Ā^k X α_k + 1·bᵀ`.
#[derive(Debug, Clone)]
pub struct TagcnLayer<T: Scalar> {
    /// `[hops + 1, in, out]`.
    pub alpha: DiffArray<T>,
    /// `[out]`.
    pub bias: DiffArray<T>,
}

impl<T: Scalar> TagcnLayer<T> {
    pub fn new(input: usize, output: usize, hops: usize, rng: &mut impl Rng) -> Result<Self> {
        let alpha = xavier_init_with_fans(
            &[hops + 1, input, output],
            Fans {
                fan_in: input,
                fan_out: output,
            },
            rng,
        )?;
        Ok(Self {
            alpha,
            bias: DiffArray::param(&[output], vec![T::zero(); output])?,
        })
    }

    pub fn from_parts(alpha: DiffArray<T>, bias: DiffArray<T>) -> Result<Self> {
        match *alpha.shape() {
            [_, _, f] if bias.shape() == [f] => Ok(Self { alpha, bias }),
            _ => Err(Error::shape("tagcn", alpha.shape(), bias.shape())),
        }
    }

    pub fn hops(&self) -> usize {
        self.alpha.shape()[0] - 1
    }

    pub fn forward(&self, x: &DiffArray<T>, adjacency: &DiffArray<T>) -> Result<DiffArray<T>> {
        tagcn_forward(x, adjacency, self)
    }
}

/// Applies a [`TagcnLayer`] to node features `x` (`[n, in]`) over the
/// normalized adjacency (`[n, n]`). Powers of the adjacency are never
/// formed; the signal is propagated one hop at a time.
pub fn tagcn_forward<T: Scalar>(
    x: &DiffArray<T>,
    adjacency: &DiffArray<T>,
    layer: &TagcnLayer<T>,
) -> Result<DiffArray<T>> {
    let (hops1, p, f) = match *layer.alpha.shape() {
        [h, p, f] => (h, p, f),
        _ => return Err(Error::shape("tagcn_forward", layer.alpha.shape(), x.shape())),
    };
    let n = match *x.shape() {
        [n, px] if px == p => n,
        _ => return Err(Error::shape("tagcn_forward", x.shape(), layer.alpha.shape())),
    };
    if adjacency.shape() != [n, n] {
        return Err(Error::shape("tagcn_forward", x.shape(), adjacency.shape()));
    }
    let mut hops = Vec::with_capacity(hops1);
    hops.push(x.clone());
    for _ in 1..hops1 {
        let next = adjacency.matmul(hops.last().unwrap())?;
        hops.push(next);
    }
    let stacked = if hops1 == 1 {
        x.clone()
    } else {
        DiffArray::concat(&hops, 1)?
    };
    let weight = layer.alpha.reshape(&[hops1 * p, f])?;
    stacked.matmul(&weight)?.add_bias(&layer.bias)
}

/// Batch normalization across the nodes of a graph (`[n, f]`).
pub fn graph_batchnorm<T: Scalar>(
    x: &DiffArray<T>,
    norm: &mut BatchNorm<T>,
    train: bool,
) -> Result<DiffArray<T>> {
    if x.ndim() != 2 {
        return Err(Error::invalid(
            "graph_batchnorm",
            format!("expected [n, f], got {:?}", x.shape()),
        ));
    }
    norm.forward(x, train)
}
