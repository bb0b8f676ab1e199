//! Independent oracles shared by the integration suites and the acceptance
//! runner: central finite differences, nested-loop divergences and dense
//! linear algebra for the graph operators.

#![allow(dead_code)]

use dsagcn_core::adversarial::domain_adversarial_loss;
use dsagcn_core::diff::{no_grad, DiffArray, Padding};
use dsagcn_core::graph::{build_adjacency, normalize_adjacency, tagcn_forward, topk_mask, topk_sparsify, GraphBatch, TagcnLayer};
use dsagcn_core::losses::{coral, lmmd, mkmmd, mmd_biased, KernelConfig, WeightMode, MIXTURE_BANDWIDTHS};
use dsagcn_core::train::{classification_loss, total_loss};
use dsagcn_core::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Arr = DiffArray<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Arr {
    let n = shape.iter().product();
    DiffArray::new(shape, uniform(rng, n, -1.0, 1.0)).unwrap()
}

pub mod wiring;

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor of 1e-3 on the denominator so that
/// near-zero derivatives are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub type ScalarFn = Box<dyn Fn(&[Arr]) -> Result<Arr>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<usize>>,
    pub f: ScalarFn,
    /// Expected ratio of the reverse-mode gradient to the true derivative;
    /// 1 except for gradient reversal.
    pub grad_scale: f64,
}

/// Reduces any output to a scalar with fixed pseudo-random weights so that
/// every output element contributes a distinct coefficient.
pub fn project(y: &Arr) -> Result<Arr> {
    let mut r = rng(0xfeed ^ y.len() as u64);
    let w = DiffArray::new(y.shape(), uniform(&mut r, y.len(), -1.0, 1.0))?;
    y.mul(&w)?.sum()
}

/// Max relative error between reverse-mode and central-difference
/// gradients over every input element.
pub fn check_case(case: &GradCase) -> Result<f64> {
    let params: Vec<Arr> = case
        .inputs
        .iter()
        .zip(&case.shapes)
        .map(|(v, s)| DiffArray::param(s, v.clone()))
        .collect::<Result<_>>()?;
    let out = (case.f)(&params)?;
    out.backward()?;
    let mut worst = 0.0f64;
    for p in &params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        for i in 0..p.len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + FD_STEP;
            let plus = no_grad(|| (case.f)(&params))?.item();
            p.data_mut()[i] = orig - FD_STEP;
            let minus = no_grad(|| (case.f)(&params))?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], case.grad_scale * numeric));
        }
    }
    Ok(worst)
}

fn case(name: &'static str, shapes: &[&[usize]], seed: u64, lo: f64, hi: f64, f: ScalarFn) -> GradCase {
    let mut r = rng(seed);
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    let inputs = shapes
        .iter()
        .map(|s| uniform(&mut r, s.iter().product(), lo, hi))
        .collect();
    GradCase {
        name,
        inputs,
        shapes,
        f,
        grad_scale: 1.0,
    }
}

fn unary(name: &'static str, shape: &[usize], seed: u64, lo: f64, hi: f64, op: fn(&Arr) -> Result<Arr>) -> GradCase {
    case(name, &[shape], seed, lo, hi, Box::new(move |x| project(&op(&x[0])?)))
}

fn one_hot_rows(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        out[i * classes + l] = 1.0;
    }
    out
}

/// Every differentiable primitive of the engine plus the composite losses.
pub fn gradient_cases() -> Vec<GradCase> {
    let fixed = KernelConfig::fixed(&[0.5, 2.0, 8.0]);
    let mut cases = vec![
        case("add", &[&[3, 4], &[3, 4]], 1, -1.0, 1.0, Box::new(|x| project(&x[0].add(&x[1])?))),
        case("sub", &[&[3, 4], &[3, 4]], 2, -1.0, 1.0, Box::new(|x| project(&x[0].sub(&x[1])?))),
        case("mul", &[&[3, 4], &[3, 4]], 3, -1.0, 1.0, Box::new(|x| project(&x[0].mul(&x[1])?))),
        unary("affine", &[5], 4, -1.0, 1.0, |x| x.affine(1.5, -0.3)),
        unary("scale", &[5], 5, -1.0, 1.0, |x| x.scale(2.5)),
        unary("neg", &[5], 6, -1.0, 1.0, |x| x.neg()),
        unary("exp", &[2, 3], 7, -2.0, 2.0, |x| x.exp()),
        unary("ln", &[2, 3], 8, 0.2, 3.0, |x| x.ln()),
        unary("powf(-0.5)", &[2, 3], 9, 0.2, 3.0, |x| x.powf(-0.5)),
        unary("powf(2.3)", &[2, 3], 10, 0.2, 3.0, |x| x.powf(2.3)),
        unary("relu", &[4, 4], 11, -1.0, 1.0, |x| x.relu()),
        unary("sigmoid", &[4, 4], 12, -3.0, 3.0, |x| x.sigmoid()),
        unary("clamp", &[4, 4], 13, -1.0, 1.0, |x| x.clamp(-0.5, 0.5)),
        case("sum", &[&[3, 4]], 14, -1.0, 1.0, Box::new(|x| x[0].exp()?.sum())),
        case("mean", &[&[3, 4]], 15, -1.0, 1.0, Box::new(|x| x[0].exp()?.mean())),
        unary("sum_rows", &[3, 4], 16, -1.0, 1.0, |x| x.sum_rows()),
        unary("mean_rows", &[3, 4], 17, -1.0, 1.0, |x| x.mean_rows()),
        unary("reshape", &[3, 4], 18, -1.0, 1.0, |x| x.reshape(&[2, 6])),
        case("matmul", &[&[3, 4], &[4, 2]], 19, -1.0, 1.0, Box::new(|x| project(&x[0].matmul(&x[1])?))),
        unary("transpose", &[3, 4], 20, -1.0, 1.0, |x| x.transpose()),
        case("concat(axis 0)", &[&[2, 3], &[3, 3]], 21, -1.0, 1.0, Box::new(|x| project(&DiffArray::concat(&[x[0].clone(), x[1].clone()], 0)?))),
        case("concat(axis 1)", &[&[3, 2], &[3, 4]], 22, -1.0, 1.0, Box::new(|x| project(&DiffArray::concat(&[x[0].clone(), x[1].clone()], 1)?))),
        unary("slice_rows", &[4, 3], 23, -1.0, 1.0, |x| x.slice_rows(1, 3)),
        case("add_bias", &[&[3, 4], &[4]], 24, -1.0, 1.0, Box::new(|x| project(&x[0].add_bias(&x[1])?))),
        case("scale_rows", &[&[3, 4], &[3]], 25, -1.0, 1.0, Box::new(|x| project(&x[0].scale_rows(&x[1])?))),
        case("scale_cols", &[&[3, 4], &[4]], 26, -1.0, 1.0, Box::new(|x| project(&x[0].scale_cols(&x[1])?))),
        unary("l2_normalize_rows", &[3, 4], 27, -1.0, 1.0, |x| x.l2_normalize_rows()),
        case("sq_dist", &[&[3, 4], &[2, 4]], 28, -1.0, 1.0, Box::new(|x| project(&x[0].sq_dist(&x[1])?))),
        unary("softmax", &[3, 4], 29, -2.0, 2.0, |x| x.softmax()),
        unary("log_softmax", &[3, 4], 30, -2.0, 2.0, |x| x.log_softmax()),
        case("conv1d(valid)", &[&[2, 2, 9], &[3, 2, 4], &[3]], 31, -1.0, 1.0, Box::new(|x| project(&x[0].conv1d(&x[1], Some(&x[2]), 1, Padding::Valid)?))),
        case("conv1d(same, stride 2)", &[&[2, 2, 9], &[3, 2, 3], &[3]], 32, -1.0, 1.0, Box::new(|x| project(&x[0].conv1d(&x[1], Some(&x[2]), 2, Padding::Same)?))),
        case("conv1d(same, even kernel)", &[&[1, 2, 8], &[2, 2, 4]], 33, -1.0, 1.0, Box::new(|x| project(&x[0].conv1d(&x[1], None, 1, Padding::Same)?))),
        case("batch_norm", &[&[4, 3, 5], &[3], &[3]], 34, -1.0, 1.0, Box::new(|x| project(&x[0].batch_norm(&x[1], &x[2], 1e-5)?.0))),
        case("batch_norm(2-D)", &[&[6, 3], &[3], &[3]], 35, -1.0, 1.0, Box::new(|x| project(&x[0].batch_norm(&x[1], &x[2], 1e-5)?.0))),
        case("batch_norm_eval", &[&[4, 3, 2], &[3], &[3]], 36, -1.0, 1.0, Box::new(|x| project(&x[0].batch_norm_eval(&x[1], &x[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?))),
        unary("max_pool1d", &[2, 3, 8], 37, -1.0, 1.0, |x| x.max_pool1d(2)),
        unary("adaptive_max_pool1d", &[2, 2, 7], 38, -1.0, 1.0, |x| x.adaptive_max_pool1d(3)),
        case("dropout", &[&[4, 5]], 39, -1.0, 1.0, Box::new(|x| project(&x[0].dropout(0.5, &mut rng(99))?))),
        GradCase {
            grad_scale: -0.7,
            ..unary("grad_reverse", &[5], 40, -1.0, 1.0, |x| x.grad_reverse(0.7))
        },
        unary("build_adjacency", &[5, 3], 41, -1.0, 1.0, |x| build_adjacency(x)),
        case("topk_sparsify", &[&[5, 3]], 42, -1.0, 1.0, Box::new(|x| project(&topk_sparsify(&build_adjacency(&x[0])?, 2)?))),
        unary("normalize_adjacency", &[4, 4], 43, 0.1, 1.0, |x| normalize_adjacency(x)),
        case(
            "tagcn_forward",
            &[&[5, 3], &[3, 3, 2], &[2]],
            44,
            -1.0,
            1.0,
            Box::new(|x| {
                let g = GraphBatch::build(&x[0], 2)?;
                let layer = TagcnLayer::from_parts(x[1].clone(), x[2].clone())?;
                project(&tagcn_forward(&x[0], &g.normalized, &layer)?)
            }),
        ),
        case("classification_loss", &[&[4, 3]], 45, -2.0, 2.0, Box::new(|x| classification_loss(&x[0], &[0, 2, 1, 2]))),
        case(
            "domain_adversarial_loss",
            &[&[4, 1], &[3, 1]],
            46,
            -2.0,
            2.0,
            Box::new(|x| domain_adversarial_loss(&x[0].sigmoid()?, &x[1].sigmoid()?)),
        ),
        case("mmd_biased", &[&[4, 3], &[3, 3]], 47, -1.0, 1.0, {
            let k = fixed.clone();
            Box::new(move |x| mmd_biased(&x[0], &x[1], &k))
        }),
        case("mkmmd", &[&[4, 3], &[3, 3]], 48, -1.0, 1.0, Box::new(|x| mkmmd(&x[0], &x[1]))),
        case("lmmd(one-hot)", &[&[5, 2], &[4, 2]], 49, -1.0, 1.0, {
            let k = fixed.clone();
            Box::new(move |x| {
                let ys = one_hot_rows(&[0, 1, 2, 0, 1], 3);
                let yt = one_hot_rows(&[1, 0, 0, 2], 3);
                Ok(lmmd(&x[0], &x[1], &ys, &yt, 3, WeightMode::OneHot, &k)?.loss)
            })
        }),
        case("lmmd(soft)", &[&[4, 2], &[3, 2]], 50, -1.0, 1.0, {
            let k = fixed.clone();
            Box::new(move |x| {
                let ys = one_hot_rows(&[0, 1, 1, 0], 2);
                let yt = vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5];
                Ok(lmmd(&x[0], &x[1], &ys, &yt, 2, WeightMode::Soft, &k)?.loss)
            })
        }),
        case("coral", &[&[5, 3], &[4, 3]], 51, -1.0, 1.0, Box::new(|x| coral(&x[0], &x[1]))),
        case("total_loss", &[&[6, 3], &[3, 2]], 52, -1.0, 1.0, {
            let k = fixed.clone();
            Box::new(move |x| {
                // Shared features feed all three terms.
                let h = x[0].matmul(&x[1])?;
                let hs = h.slice_rows(0, 3)?;
                let ht = h.slice_rows(3, 6)?;
                let l_c = classification_loss(&hs, &[0, 1, 1])?;
                let p = h.sum_rows()?.reshape(&[6, 1])?.sigmoid()?;
                let l_d = domain_adversarial_loss(&p.slice_rows(0, 3)?, &p.slice_rows(3, 6)?)?;
                let ys = one_hot_rows(&[0, 1, 1], 2);
                let yt = one_hot_rows(&[1, 0, 1], 2);
                let l_t = lmmd(&hs, &ht, &ys, &yt, 2, WeightMode::OneHot, &k)?.loss;
                total_loss(&l_c, Some(&l_d), Some(&l_t), 1.0, 0.5)
            })
        }),
    ];
    cases.shrink_to_fit();
    cases
}

// ---------------------------------------------------------- divergences

pub fn rows(a: &[f64], d: usize) -> Vec<&[f64]> {
    a.chunks(d).collect()
}

fn sqd(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn brute_kernel(x: &[f64], y: &[f64], bandwidths: &[f64]) -> f64 {
    let d2 = sqd(x, y);
    bandwidths.iter().map(|s| (-d2 / s).exp()).sum()
}

/// Median pairwise squared distance over `i < j` of the pooled samples.
pub fn brute_median(pooled: &[&[f64]]) -> f64 {
    let mut v = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            v.push(sqd(pooled[i], pooled[j]));
        }
    }
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let med = if m % 2 == 1 { v[m / 2] } else { (v[m / 2 - 1] + v[m / 2]) / 2.0 };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

pub fn brute_mmd(s: &[&[f64]], t: &[&[f64]], bw: &[f64]) -> f64 {
    let (ns, nt) = (s.len() as f64, t.len() as f64);
    let mut ss = 0.0;
    for a in s {
        for b in s {
            ss += brute_kernel(a, b, bw);
        }
    }
    let mut tt = 0.0;
    for a in t {
        for b in t {
            tt += brute_kernel(a, b, bw);
        }
    }
    let mut st = 0.0;
    for a in s {
        for b in t {
            st += brute_kernel(a, b, bw);
        }
    }
    ss / (ns * ns) + tt / (nt * nt) - 2.0 * st / (ns * nt)
}

/// Class-weighted MMD averaged over classes present in both domains.
pub fn brute_lmmd(s: &[&[f64]], t: &[&[f64]], ys: &[Vec<f64>], yt: &[Vec<f64>], classes: usize, bw: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut shared = 0;
    for c in 0..classes {
        let sum_s: f64 = ys.iter().map(|r| r[c]).sum();
        let sum_t: f64 = yt.iter().map(|r| r[c]).sum();
        if sum_s == 0.0 || sum_t == 0.0 {
            continue;
        }
        shared += 1;
        let ws: Vec<f64> = ys.iter().map(|r| r[c] / sum_s).collect();
        let wt: Vec<f64> = yt.iter().map(|r| r[c] / sum_t).collect();
        let mut v = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                v += ws[i] * ws[j] * brute_kernel(s[i], s[j], bw);
            }
        }
        for i in 0..t.len() {
            for j in 0..t.len() {
                v += wt[i] * wt[j] * brute_kernel(t[i], t[j], bw);
            }
        }
        for i in 0..s.len() {
            for j in 0..t.len() {
                v -= 2.0 * ws[i] * wt[j] * brute_kernel(s[i], t[j], bw);
            }
        }
        total += v;
    }
    if shared == 0 {
        0.0
    } else {
        total / shared as f64
    }
}

fn brute_cov(x: &[&[f64]], d: usize) -> Vec<f64> {
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let mut c = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            c[a * d + b] = x.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0);
        }
    }
    c
}

pub fn brute_coral(s: &[&[f64]], t: &[&[f64]], d: usize) -> f64 {
    let cs = brute_cov(s, d);
    let ct = brute_cov(t, d);
    cs.iter().zip(&ct).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (4.0 * (d * d) as f64)
}

/// Worst absolute deviation of the library divergences from the
/// nested-loop oracles over `trials` random instances with `n ≤ 8`,
/// `d ≤ 4`, `C ≤ 3`.
pub fn divergence_oracle_error(trials: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut r = rng(1000 + trial);
        let ns = r.random_range(2..=8);
        let nt = r.random_range(2..=8);
        let d = r.random_range(1..=4);
        let classes = r.random_range(1..=3);
        let sv = uniform(&mut r, ns * d, -2.0, 2.0);
        let tv = uniform(&mut r, nt * d, -2.0, 2.0);
        let s = DiffArray::new(&[ns, d], sv.clone())?;
        let t = DiffArray::new(&[nt, d], tv.clone())?;
        let (sr, tr) = (rows(&sv, d), rows(&tv, d));

        let fixed = uniform(&mut r, 3, 0.1, 5.0);
        let cfg = KernelConfig::fixed(&fixed);
        worst = worst.max((mmd_biased(&s, &t, &cfg)?.item() - brute_mmd(&sr, &tr, &fixed)).abs());
        worst = worst.max((mkmmd(&s, &t)?.item() - brute_mmd(&sr, &tr, &MIXTURE_BANDWIDTHS)).abs());

        let pooled: Vec<&[f64]> = sr.iter().chain(&tr).copied().collect();
        let med = brute_median(&pooled);
        let median_bw: Vec<f64> = (0..5).map(|b| med * 2f64.powf(b as f64 - 2.0)).collect();
        worst = worst.max((mmd_biased(&s, &t, &KernelConfig::median())?.item() - brute_mmd(&sr, &tr, &median_bw)).abs());

        let ys: Vec<Vec<f64>> = (0..ns)
            .map(|_| {
                let mut row = vec![0.0; classes];
                row[r.random_range(0..classes)] = 1.0;
                row
            })
            .collect();
        let yt_hard: Vec<Vec<f64>> = (0..nt)
            .map(|_| {
                let mut row = vec![0.0; classes];
                row[r.random_range(0..classes)] = 1.0;
                row
            })
            .collect();
        let yt_soft: Vec<Vec<f64>> = (0..nt)
            .map(|_| {
                let raw = uniform(&mut r, classes, 0.05, 1.0);
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            })
            .collect();
        let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
        let got = lmmd(&s, &t, &flat(&ys), &flat(&yt_hard), classes, WeightMode::OneHot, &cfg)?.loss.item();
        worst = worst.max((got - brute_lmmd(&sr, &tr, &ys, &yt_hard, classes, &fixed)).abs());
        let got = lmmd(&s, &t, &flat(&ys), &flat(&yt_soft), classes, WeightMode::Soft, &cfg)?.loss.item();
        worst = worst.max((got - brute_lmmd(&sr, &tr, &ys, &yt_soft, classes, &fixed)).abs());

        worst = worst.max((coral(&s, &t)?.item() - brute_coral(&sr, &tr, d)).abs());
    }
    Ok(worst)
}

/// `lmmd` with a single class against `mmd_biased`, and every divergence
/// of a sample set against itself. Returns the two worst deviations.
pub fn divergence_identities(trials: u64) -> Result<(f64, f64)> {
    let (mut single, mut identical) = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let mut r = rng(5000 + trial);
        let ns = r.random_range(1..=8);
        let nt = r.random_range(1..=8);
        let d = r.random_range(1..=4);
        let s = DiffArray::new(&[ns, d], uniform(&mut r, ns * d, -2.0, 2.0))?;
        let t = DiffArray::new(&[nt, d], uniform(&mut r, nt * d, -2.0, 2.0))?;
        for cfg in [KernelConfig::fixed(&uniform(&mut r, 2, 0.1, 5.0)), KernelConfig::median()] {
            let l = lmmd(&s, &t, &vec![1.0; ns], &vec![1.0; nt], 1, WeightMode::OneHot, &cfg)?.loss.item();
            single = single.max((l - mmd_biased(&s, &t, &cfg)?.item()).abs());
            identical = identical.max(mmd_biased(&s, &s, &cfg)?.item().abs());
            let ys = vec![1.0; ns];
            identical = identical.max(lmmd(&s, &s, &ys, &ys, 1, WeightMode::OneHot, &cfg)?.loss.item().abs());
        }
        identical = identical.max(mkmmd(&s, &s)?.item().abs());
        if ns >= 2 {
            identical = identical.max(coral(&s, &s)?.item().abs());
        }
    }
    Ok((single, identical))
}

// ---------------------------------------------------------------- graphs

pub fn dense(a: &Arr) -> DMatrix<f64> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    DMatrix::from_row_slice(r, c, &a.to_vec())
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
}

/// `Σ_k Ā^k X α_k + b` with explicit matrix powers.
pub fn tagcn_oracle(x: &Arr, a: &Arr, layer: &TagcnLayer<f64>) -> DMatrix<f64> {
    let (h, p, f) = (layer.alpha.shape()[0], layer.alpha.shape()[1], layer.alpha.shape()[2]);
    let alpha = layer.alpha.to_vec();
    let xm = dense(x);
    let am = dense(a);
    let n = xm.nrows();
    let mut out = DMatrix::<f64>::zeros(n, f);
    let mut power = DMatrix::<f64>::identity(n, n);
    for k in 0..h {
        let ak = DMatrix::from_row_slice(p, f, &alpha[k * p * f..(k + 1) * p * f]);
        out += &power * &xm * ak;
        power = &power * &am;
    }
    let bias = layer.bias.to_vec();
    for i in 0..n {
        for j in 0..f {
            out[(i, j)] += bias[j];
        }
    }
    out
}

pub struct GraphSuite {
    pub batches: usize,
    pub cardinality_failures: usize,
    pub diagonal_failures: usize,
    pub max_spectral_radius: f64,
    pub oracle_error: f64,
    pub k0_error: f64,
}

/// Runs the graph invariants over `batches` random mini-batches.
pub fn graph_suite(batches: u64) -> Result<GraphSuite> {
    let mut out = GraphSuite {
        batches: batches as usize,
        cardinality_failures: 0,
        diagonal_failures: 0,
        max_spectral_radius: 0.0,
        oracle_error: 0.0,
        k0_error: 0.0,
    };
    for b in 0..batches {
        let mut r = rng(20_000 + b);
        let n = r.random_range(1..=8);
        let d = r.random_range(1..=5);
        let k = r.random_range(1..=n + 1);
        let x = DiffArray::new(&[n, d], uniform(&mut r, n * d, -1.0, 1.0))?;
        let g = GraphBatch::build(&x, k)?;
        let sparse = g.sparse.to_vec();
        let adj = g.adjacency.to_vec();
        let mask = topk_mask(&adj, n, k);
        for i in 0..n {
            let kept = mask[i * n..(i + 1) * n].iter().filter(|m| **m == 1.0).count();
            let nonzero = sparse[i * n..(i + 1) * n].iter().filter(|v| **v != 0.0).count();
            if kept != k.min(n) || nonzero > kept {
                out.cardinality_failures += 1;
            }
            if mask[i * n + i] != 1.0 || sparse[i * n + i] != 1.0 {
                out.diagonal_failures += 1;
            }
        }
        out.max_spectral_radius = out.max_spectral_radius.max(spectral_radius(&dense(&g.normalized)));

        let hops = r.random_range(0..=3);
        let f = r.random_range(1..=4);
        let layer = TagcnLayer::<f64>::new(d, f, hops, &mut r)?;
        layer.bias.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        let got = dense(&tagcn_forward(&x, &g.normalized, &layer)?);
        let want = tagcn_oracle(&x, &g.normalized, &layer);
        out.oracle_error = out.oracle_error.max((got - want).abs().max());

        let layer0 = TagcnLayer::<f64>::new(d, f, 0, &mut r)?;
        let y = tagcn_forward(&x, &g.normalized, &layer0)?;
        let w = layer0.alpha.reshape(&[d, f])?;
        let dense_layer = x.matmul(&w)?.add_bias(&layer0.bias)?;
        let diff = y.to_vec().iter().zip(dense_layer.to_vec()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        out.k0_error = out.k0_error.max(diff);
    }
    Ok(out)
}

// ------------------------------------------------------------------- data

use dsagcn_core::signal::{make_splits, synth_generate, Split, SplitSpec, SynthConfig, WindowedDataset};
use std::collections::BTreeMap;

/// A few short synthetic windows per class and condition, split 8/4.
pub fn tiny_data(classes: usize, seed: u64) -> BTreeMap<String, Split> {
    let cfg = SynthConfig {
        classes,
        windows_per_class: 12,
        window_length: 64,
        window_step: 64,
        seed,
        ..SynthConfig::default()
    };
    let (m, sigs) = synth_generate(&cfg).unwrap();
    let data = WindowedDataset::from_signals(m, &sigs).unwrap();
    make_splits(&data, &SplitSpec { train: 8, test: 4, seed }).unwrap()
}
