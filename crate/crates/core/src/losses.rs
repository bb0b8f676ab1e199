//! Kernel two-sample discrepancies used as alignment losses: biased MMD,
//! the fixed five-bandwidth multi-kernel MMD, class-weighted local MMD and
//! CORAL.
//!
//! All kernel losses share one shape: with `Z = [Z_s; Z_t]` pooled and
//! `K` the summed RBF Gram matrix of `Z`, the loss is `Σ_ij M_ij K_ij` for
//! a constant coefficient matrix `M` built from per-sample weights.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::diff::{no_grad, DiffArray, Scalar};
use crate::error::{Error, Result};

/// Bandwidths of the fixed multi-kernel mixture.
pub const MIXTURE_BANDWIDTHS: [f64; 5] = [0.001, 0.01, 1.0, 10.0, 100.0];

static EMPTY_LMMD: AtomicUsize = AtomicUsize::new(0);

/// Number of LMMD evaluations that found no class shared by both domains.
pub fn empty_lmmd_warnings() -> usize {
    EMPTY_LMMD.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Bandwidth {
    /// Explicit list; every value must be positive.
    Fixed { values: Vec<f64> },
    /// `kernels` bandwidths spaced geometrically by `multiplier` around the
    /// median pairwise squared distance of the pooled samples.
    Median { kernels: usize, multiplier: f64 },
}

/// Sum of RBF kernels `k(x, y) = Σ_b exp(-‖x - y‖² / σ_b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl KernelConfig {
    pub fn fixed(values: &[f64]) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed {
                values: values.to_vec(),
            },
        }
    }

    /// The five-bandwidth mixture `{0.001, 0.01, 1, 10, 100}`.
    pub fn mixture() -> Self {
        Self::fixed(&MIXTURE_BANDWIDTHS)
    }

    /// Five median-centred kernels spaced by a factor of two.
    pub fn median() -> Self {
        Self {
            bandwidth: Bandwidth::Median {
                kernels: 5,
                multiplier: 2.0,
            },
        }
    }

    /// One kernel at the median heuristic.
    pub fn median_single() -> Self {
        Self {
            bandwidth: Bandwidth::Median {
                kernels: 1,
                multiplier: 2.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.bandwidth {
            Bandwidth::Fixed { values } => {
                if values.is_empty() || values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::invalid("kernel", "bandwidths must be a non-empty list of positive values"));
                }
            }
            Bandwidth::Median { kernels, multiplier } => {
                if *kernels == 0 || !(*multiplier > 0.0) {
                    return Err(Error::invalid("kernel", "median mode needs ≥1 kernel and a positive multiplier"));
                }
            }
        }
        Ok(())
    }

    /// Concrete bandwidths given the pooled pairwise squared distances
    /// (`[n, n]`, row-major).
    pub fn resolve<T: Scalar>(&self, sq_dists: &[T], n: usize) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(match &self.bandwidth {
            Bandwidth::Fixed { values } => values.clone(),
            Bandwidth::Median { kernels, multiplier } => {
                let mut upper: Vec<f64> = (0..n)
                    .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                    .map(|(i, j)| sq_dists[i * n + j].to_f64().unwrap())
                    .collect();
                let median = if upper.is_empty() {
                    0.0
                } else {
                    upper.sort_by(|a, b| a.total_cmp(b));
                    let m = upper.len();
                    if m % 2 == 1 {
                        upper[m / 2]
                    } else {
                        0.5 * (upper[m / 2 - 1] + upper[m / 2])
                    }
                };
                let centre = if median > 0.0 { median } else { 1.0 };
                let half = (*kernels as f64 - 1.0) / 2.0;
                (0..*kernels)
                    .map(|b| centre * multiplier.powf(b as f64 - half))
                    .collect()
            }
        })
    }
}

fn rows_cols<T: Scalar>(op: &'static str, a: &DiffArray<T>) -> Result<(usize, usize)> {
    match *a.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(op, format!("expected [n, d], got {:?}", a.shape()))),
    }
}

fn kernel_from_sq_dists<T: Scalar>(d: &DiffArray<T>, bandwidths: &[f64]) -> Result<DiffArray<T>> {
    let mut total: Option<DiffArray<T>> = None;
    for &s in bandwidths {
        let k = d.scale(T::lit(-1.0 / s))?.exp()?;
        total = Some(match total {
            None => k,
            Some(t) => t.add(&k)?,
        });
    }
    total.ok_or_else(|| Error::invalid("kernel", "no bandwidths"))
}

/// Summed RBF Gram matrix between the rows of `x` (`[n, d]`) and `y`
/// (`[m, d]`). Median bandwidths are resolved from the pooled rows.
pub fn rbf_gram<T: Scalar>(x: &DiffArray<T>, y: &DiffArray<T>, config: &KernelConfig) -> Result<DiffArray<T>> {
    let (n, d) = rows_cols("rbf_gram", x)?;
    let (m, d2) = rows_cols("rbf_gram", y)?;
    if n == 0 || m == 0 {
        return Err(Error::Empty("rbf_gram input"));
    }
    if d != d2 {
        return Err(Error::shape("rbf_gram", x.shape(), y.shape()));
    }
    let bandwidths = match config.bandwidth {
        Bandwidth::Fixed { .. } => config.resolve::<T>(&[], 0)?,
        Bandwidth::Median { .. } => {
            let pooled = DiffArray::concat(&[x.detach(), y.detach()], 0)?;
            let sq = no_grad(|| pooled.sq_dist(&pooled))?;
            let bw = config.resolve(&sq.data(), n + m)?;
            bw
        }
    };
    kernel_from_sq_dists(&x.sq_dist(y)?, &bandwidths)
}

/// `Σ_ij M_ij k(z_i, z_j)` over the pooled rows `[source; target]`, with
/// `M = Σ_c w_c w_cᵀ` for the given weight columns.
fn weighted_kernel_sum<T: Scalar>(
    source: &DiffArray<T>,
    target: &DiffArray<T>,
    weights: &[Vec<f64>],
    scale: f64,
    config: &KernelConfig,
) -> Result<DiffArray<T>> {
    let pooled = DiffArray::concat(&[source.clone(), target.clone()], 0)?;
    let n = pooled.shape()[0];
    let sq = pooled.sq_dist(&pooled)?;
    let bandwidths = config.resolve(&sq.data(), n)?;
    let kernel = kernel_from_sq_dists(&sq, &bandwidths)?;
    let mut coef = vec![0.0f64; n * n];
    for w in weights {
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                coef[i * n + j] += w[i] * w[j];
            }
        }
    }
    let coef = coef.into_iter().map(|c| T::lit(c * scale)).collect();
    kernel.mul(&DiffArray::new(&[n, n], coef)?)?.sum()
}

fn check_pair<T: Scalar>(op: &'static str, s: &DiffArray<T>, t: &DiffArray<T>) -> Result<(usize, usize, usize)> {
    let (ns, d) = rows_cols(op, s)?;
    let (nt, d2) = rows_cols(op, t)?;
    if d != d2 {
        return Err(Error::shape(op, s.shape(), t.shape()));
    }
    if ns == 0 || nt == 0 {
        return Err(Error::Empty("domain sample"));
    }
    Ok((ns, nt, d))
}

/// Biased (V-statistic) squared MMD between the rows of `source` and `target`.
pub fn mmd_biased<T: Scalar>(source: &DiffArray<T>, target: &DiffArray<T>, config: &KernelConfig) -> Result<DiffArray<T>> {
    let (ns, nt, _) = check_pair("mmd_biased", source, target)?;
    let mut w = vec![1.0 / ns as f64; ns];
    w.extend(std::iter::repeat_n(-1.0 / nt as f64, nt));
    weighted_kernel_sum(source, target, &[w], 1.0, config)
}

/// Biased MMD under the fixed five-bandwidth mixture.
pub fn mkmmd<T: Scalar>(source: &DiffArray<T>, target: &DiffArray<T>) -> Result<DiffArray<T>> {
    mmd_biased(source, target, &KernelConfig::mixture())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    OneHot,
    Soft,
}

/// Per-class sample weights: column `c` of the input divided by its sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub samples: usize,
    pub classes: usize,
    /// `[samples, classes]`, row-major.
    pub weights: Vec<f64>,
    pub present: Vec<bool>,
}

impl ClassWeights {
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.samples).map(|i| self.weights[i * self.classes + c]).collect()
    }
}

/// Normalizes each class column of `labels` (`[n, classes]` one-hot rows or
/// probability rows) to sum to one. Empty columns are marked absent.
pub fn class_weights(labels: &[f64], classes: usize, mode: WeightMode) -> Result<ClassWeights> {
    if classes == 0 || labels.len() % classes != 0 {
        return Err(Error::invalid("class_weights", "label matrix does not match class count"));
    }
    let n = labels.len() / classes;
    if labels.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("class_weights", "negative or non-finite entry"));
    }
    for row in labels.chunks(classes) {
        let sum: f64 = row.iter().sum();
        let ok = match mode {
            WeightMode::OneHot => row.iter().all(|&v| v == 0.0 || v == 1.0) && sum == 1.0,
            WeightMode::Soft => (sum - 1.0).abs() < 1e-6,
        };
        if !ok {
            return Err(Error::invalid("class_weights", format!("invalid {mode:?} row {row:?}")));
        }
    }
    let mut weights = vec![0.0; n * classes];
    let mut present = vec![false; classes];
    for c in 0..classes {
        let total: f64 = (0..n).map(|i| labels[i * classes + c]).sum();
        if total > 0.0 {
            present[c] = true;
            for i in 0..n {
                weights[i * classes + c] = labels[i * classes + c] / total;
            }
        }
    }
    Ok(ClassWeights {
        samples: n,
        classes,
        weights,
        present,
    })
}

/// Row-wise argmax of `[n, classes]` logits, ties to the lowest index.
pub fn pseudo_label_indices<T: Scalar>(logits: &DiffArray<T>) -> Result<Vec<usize>> {
    let (_, c) = rows_cols("pseudo_labels", logits)?;
    if c == 0 {
        return Err(Error::Empty("logit row"));
    }
    logits.ensure_finite("pseudo_labels")?;
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect())
}

/// One-hot pseudo-labels (`[n, classes]`, no gradient) from target logits.
pub fn pseudo_labels<T: Scalar>(logits: &DiffArray<T>) -> Result<Vec<f64>> {
    let c = rows_cols("pseudo_labels", logits)?.1;
    let idx = pseudo_label_indices(logits)?;
    let mut out = vec![0.0; idx.len() * c];
    for (i, &k) in idx.iter().enumerate() {
        out[i * c + k] = 1.0;
    }
    Ok(out)
}

/// Softmax probabilities of target logits, for the soft weighting mode.
pub fn soft_labels<T: Scalar>(logits: &DiffArray<T>) -> Result<Vec<f64>> {
    let probs = no_grad(|| logits.softmax())?;
    let v = probs.data().iter().map(|v| v.to_f64().unwrap()).collect();
    Ok(v)
}

/// Result of an LMMD evaluation.
#[derive(Debug, Clone)]
pub struct Lmmd<T: Scalar> {
    pub loss: DiffArray<T>,
    /// Classes present in both domains.
    pub shared_classes: usize,
}

/// Local MMD: the class-weighted MMD averaged over classes present in both
/// domains. `source_labels` must be one-hot; `target_labels` may be one-hot
/// pseudo-labels or probabilities according to `target_mode`. Weights are
/// constants for differentiation.
pub fn lmmd<T: Scalar>(
    source: &DiffArray<T>,
    target: &DiffArray<T>,
    source_labels: &[f64],
    target_labels: &[f64],
    classes: usize,
    target_mode: WeightMode,
    config: &KernelConfig,
) -> Result<Lmmd<T>> {
    let (ns, nt, _) = check_pair("lmmd", source, target)?;
    if source_labels.len() != ns * classes || target_labels.len() != nt * classes {
        return Err(Error::invalid("lmmd", "label matrices do not match sample counts"));
    }
    let ws = class_weights(source_labels, classes, WeightMode::OneHot)?;
    let wt = class_weights(target_labels, classes, target_mode)?;
    let shared: Vec<usize> = (0..classes).filter(|&c| ws.present[c] && wt.present[c]).collect();
    if shared.is_empty() {
        EMPTY_LMMD.fetch_add(1, Ordering::Relaxed);
        log::warn!("lmmd: no class present in both domains; loss set to 0");
        let zero = source.sum()?.add(&target.sum()?)?.scale(T::zero())?;
        return Ok(Lmmd {
            loss: zero,
            shared_classes: 0,
        });
    }
    let columns: Vec<Vec<f64>> = shared
        .iter()
        .map(|&c| {
            let mut w = ws.column(c);
            w.extend(wt.column(c).into_iter().map(|v| -v));
            w
        })
        .collect();
    let loss = weighted_kernel_sum(source, target, &columns, 1.0 / shared.len() as f64, config)?;
    Ok(Lmmd {
        loss,
        shared_classes: shared.len(),
    })
}

/// CORAL: `‖C_s − C_t‖²_F / (4 d²)` with sample covariances (divisor `n − 1`).
pub fn coral<T: Scalar>(source: &DiffArray<T>, target: &DiffArray<T>) -> Result<DiffArray<T>> {
    let (ns, nt, d) = check_pair("coral", source, target)?;
    if ns < 2 || nt < 2 {
        return Err(Error::invalid("coral", format!("needs at least 2 samples per domain, got {ns} and {nt}")));
    }
    let cs = covariance(source, ns)?;
    let ct = covariance(target, nt)?;
    let diff = cs.sub(&ct)?;
    diff.mul(&diff)?.sum()?.scale(T::lit(1.0 / (4.0 * (d * d) as f64)))
}

fn covariance<T: Scalar>(x: &DiffArray<T>, n: usize) -> Result<DiffArray<T>> {
    // Centering matrix I − 11ᵀ/n.
    let inv = 1.0 / n as f64;
    let centering: Vec<T> = (0..n * n)
        .map(|k| T::lit(if k / n == k % n { 1.0 - inv } else { -inv }))
        .collect();
    let centered = DiffArray::new(&[n, n], centering)?.matmul(x)?;
    centered
        .transpose()?
        .matmul(&centered)?
        .scale(T::lit(1.0 / (n as f64 - 1.0)))
}
