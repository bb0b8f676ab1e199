//! Network primitives: convolution, normalization, pooling, dropout and
//! gradient reversal.

use rand::Rng;

use super::{DiffArray, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Zero padding so that the output length is `ceil(len / stride)`.
    /// Odd totals put the extra zero on the left.
    Same,
}

/// Output length and left padding of a 1-D convolution.
pub fn conv1d_geometry(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (len >= kernel).then(|| ((len - kernel) / stride + 1, 0)),
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out.max(1) - 1) * stride + kernel).saturating_sub(len);
            Some((out, total.div_ceil(2)))
        }
    }
}

/// Fills `cols` (`[cin * kernel, out]`, row-major) from one sample `x` (`[cin, len]`).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    left: usize,
    out: usize,
    cols: &mut [T],
) {
    for ci in 0..cin {
        let xc = &x[ci * len..(ci + 1) * len];
        for kk in 0..kernel {
            let row = &mut cols[(ci * kernel + kk) * out..(ci * kernel + kk + 1) * out];
            for (lo, v) in row.iter_mut().enumerate() {
                let pos = (lo * stride + kk) as isize - left as isize;
                *v = if pos >= 0 && (pos as usize) < len {
                    xc[pos as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    left: usize,
    out: usize,
    dx: &mut [T],
) {
    for ci in 0..cin {
        let dxc = &mut dx[ci * len..(ci + 1) * len];
        for kk in 0..kernel {
            let row = &cols[(ci * kernel + kk) * out..(ci * kernel + kk + 1) * out];
            for (lo, &v) in row.iter().enumerate() {
                let pos = (lo * stride + kk) as isize - left as isize;
                if pos >= 0 && (pos as usize) < len {
                    dxc[pos as usize] = dxc[pos as usize] + v;
                }
            }
        }
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population variance (divisor = number of reduced elements).
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// `[n, c]` or `[n, c, l]` viewed as `(n, c, l)`.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, l] => Ok((n, c, l)),
        _ => Err(Error::invalid(
            op,
            format!("expected [n, c] or [n, c, l], got {shape:?}"),
        )),
    }
}

impl<T: Scalar> DiffArray<T> {
    /// 1-D cross-correlation. `self: [n, cin, len]`, `weight: [cout, cin, k]`,
    /// optional `bias: [cout]`.
    pub fn conv1d(
        &self,
        weight: &Self,
        bias: Option<&Self>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (n, cin, len) = match *self.shape() {
            [n, c, l] => (n, c, l),
            _ => return Err(Error::shape("conv1d", self.shape(), weight.shape())),
        };
        let (cout, kernel) = match *weight.shape() {
            [co, ci, k] if ci == cin => (co, k),
            _ => return Err(Error::shape("conv1d", self.shape(), weight.shape())),
        };
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv1d", weight.shape(), b.shape()));
            }
            b.ensure_finite("conv1d")?;
        }
        self.ensure_finite("conv1d")?;
        weight.ensure_finite("conv1d")?;
        let (out, left) = conv1d_geometry(len, kernel, stride, padding).ok_or_else(|| {
            Error::invalid(
                "conv1d",
                format!("kernel {kernel} / stride {stride} invalid for length {len}"),
            )
        })?;
        let ck = cin * kernel;

        let x = self.to_vec();
        let mut y = vec![T::zero(); n * cout * out];
        {
            let w = weight.data();
            let mut cols = vec![T::zero(); ck * out];
            for s in 0..n {
                im2col(&x[s * cin * len..(s + 1) * cin * len], cin, len, kernel, stride, left, out, &mut cols);
                T::gemm(
                    cout,
                    ck,
                    out,
                    T::one(),
                    &w,
                    ck as isize,
                    1,
                    &cols,
                    out as isize,
                    1,
                    T::zero(),
                    &mut y[s * cout * out..(s + 1) * cout * out],
                    out as isize,
                    1,
                );
            }
            if let Some(b) = bias {
                let b = b.data();
                for s in 0..n {
                    for co in 0..cout {
                        let base = (s * cout + co) * out;
                        y[base..base + out].iter_mut().for_each(|v| *v = *v + b[co]);
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        let rb = bias.is_some_and(|b| b.requires_grad());
        let w_ref = weight.clone();
        Ok(Self::from_op(vec![n, cout, out], y, parents, move |g| {
            let w = w_ref.data();
            let mut dx = rx.then(|| vec![T::zero(); n * cin * len]);
            let mut dw = rw.then(|| vec![T::zero(); cout * ck]);
            let mut cols = vec![T::zero(); ck * out];
            let mut dcols = vec![T::zero(); ck * out];
            for s in 0..n {
                let gs = &g[s * cout * out..(s + 1) * cout * out];
                if let Some(dw) = dw.as_mut() {
                    im2col(&x[s * cin * len..(s + 1) * cin * len], cin, len, kernel, stride, left, out, &mut cols);
                    // dW += G · colsᵀ
                    T::gemm(
                        cout,
                        out,
                        ck,
                        T::one(),
                        gs,
                        out as isize,
                        1,
                        &cols,
                        1,
                        out as isize,
                        T::one(),
                        dw,
                        ck as isize,
                        1,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols = Wᵀ · G
                    T::gemm(
                        ck,
                        cout,
                        out,
                        T::one(),
                        &w,
                        1,
                        ck as isize,
                        gs,
                        out as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        out as isize,
                        1,
                    );
                    col2im(&dcols, cin, len, kernel, stride, left, out, &mut dx[s * cin * len..(s + 1) * cin * len]);
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(rb.then(|| {
                    let mut db = vec![T::zero(); cout];
                    for s in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let base = (s * cout + co) * out;
                            *d = g[base..base + out].iter().fold(*d, |a, &v| a + v);
                        }
                    }
                    db
                }));
            }
            grads
        }))
    }

    /// Training-mode batch normalization over every axis except the channel
    /// axis (axis 1). Returns the output and the batch statistics.
    pub fn batch_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<(Self, BatchStats<T>)> {
        let (n, c, l) = channel_layout("batch_norm", self.shape())?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batch_norm", self.shape(), gamma.shape()));
        }
        let count = n * l;
        if count < 2 {
            return Err(Error::invalid(
                "batch_norm",
                format!("training mode needs at least 2 values per channel, got {count}"),
            ));
        }
        self.ensure_finite("batch_norm")?;
        gamma.ensure_finite("batch_norm")?;
        beta.ensure_finite("batch_norm")?;
        let x = self.to_vec();
        let inv_count = T::from_usize(count).unwrap().recip();
        let idx = move |s: usize, ch: usize, i: usize| (s * c + ch) * l + i;

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for s in 0..n {
                for i in 0..l {
                    acc = acc + x[idx(s, ch, i)];
                }
            }
            mean[ch] = acc * inv_count;
            let mut acc = T::zero();
            for s in 0..n {
                for i in 0..l {
                    let d = x[idx(s, ch, i)] - mean[ch];
                    acc = acc + d * d;
                }
            }
            var[ch] = acc * inv_count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let gam = gamma.to_vec();
        let bet = beta.to_vec();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..l {
                    let k = idx(s, ch, i);
                    xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                    y[k] = xhat[k] * gam[ch] + bet[ch];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var,
            count,
        };
        let (rx, rg, rb) = (self.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        let out = Self::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..l {
                            let k = idx(s, ch, i);
                            dgamma[ch] = dgamma[ch] + g[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + g[k];
                        }
                    }
                }
                let dx = rx.then(|| {
                    // dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)),
                    // with dxhat = g·γ, so the sums are γ·dβ and γ·dγ.
                    let mut dx = vec![T::zero(); n * c * l];
                    let m = T::from_usize(count).unwrap();
                    for ch in 0..c {
                        let sum_dxhat = gam[ch] * dbeta[ch];
                        let sum_dxhat_xhat = gam[ch] * dgamma[ch];
                        let scale = inv_std[ch] * inv_count;
                        for s in 0..n {
                            for i in 0..l {
                                let k = idx(s, ch, i);
                                dx[k] = scale
                                    * (m * g[k] * gam[ch] - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                            }
                        }
                    }
                    dx
                });
                vec![dx, rg.then_some(dgamma), rb.then_some(dbeta)]
            },
        );
        Ok((out, stats))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Self,
        beta: &Self,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Self> {
        let (n, c, l) = channel_layout("batch_norm_eval", self.shape())?;
        if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm_eval", self.shape(), gamma.shape()));
        }
        self.ensure_finite("batch_norm_eval")?;
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let x = self.to_vec();
        let gam = gamma.to_vec();
        let bet = beta.to_vec();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..l {
                    let k = (s * c + ch) * l + i;
                    xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                    y[k] = xhat[k] * gam[ch] + bet[ch];
                }
            }
        }
        Ok(Self::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dx = vec![T::zero(); n * c * l];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..l {
                            let k = (s * c + ch) * l + i;
                            dx[k] = g[k] * gam[ch] * inv_std[ch];
                            dgamma[ch] = dgamma[ch] + g[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + g[k];
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        ))
    }

    /// Max over non-overlapping windows of `window` along the last axis of
    /// `[n, c, len]`; a trailing partial window is dropped. Ties route the
    /// gradient to the first maximal index.
    pub fn max_pool1d(&self, window: usize) -> Result<Self> {
        let (n, c, len) = match *self.shape() {
            [n, c, l] => (n, c, l),
            _ => return Err(Error::invalid("max_pool1d", format!("expected [n, c, len], got {:?}", self.shape()))),
        };
        if window == 0 || len < window {
            return Err(Error::invalid("max_pool1d", format!("window {window} for length {len}")));
        }
        let out = len / window;
        let bins: Vec<(usize, usize)> = (0..out).map(|i| (i * window, (i + 1) * window)).collect();
        self.pool_bins("max_pool1d", n, c, len, &bins)
    }

    /// Adaptive max pooling of `[n, c, len]` to `[n, c, out_len]`; bin `i`
    /// covers `[floor(i·len/out), ceil((i+1)·len/out))`.
    pub fn adaptive_max_pool1d(&self, out_len: usize) -> Result<Self> {
        let (n, c, len) = match *self.shape() {
            [n, c, l] => (n, c, l),
            _ => return Err(Error::invalid("adaptive_max_pool1d", format!("expected [n, c, len], got {:?}", self.shape()))),
        };
        if out_len == 0 || len == 0 {
            return Err(Error::invalid("adaptive_max_pool1d", format!("output length {out_len} for length {len}")));
        }
        let bins: Vec<(usize, usize)> = (0..out_len)
            .map(|i| ((i * len) / out_len, ((i + 1) * len).div_ceil(out_len)))
            .collect();
        self.pool_bins("adaptive_max_pool1d", n, c, len, &bins)
    }

    fn pool_bins(
        &self,
        op: &'static str,
        n: usize,
        c: usize,
        len: usize,
        bins: &[(usize, usize)],
    ) -> Result<Self> {
        self.ensure_finite(op)?;
        let out = bins.len();
        let x = self.data();
        let mut y = Vec::with_capacity(n * c * out);
        let mut arg = Vec::with_capacity(n * c * out);
        for row in 0..n * c {
            let xr = &x[row * len..(row + 1) * len];
            for &(s, e) in bins {
                let mut best = s;
                for i in s + 1..e {
                    if xr[i] > xr[best] {
                        best = i;
                    }
                }
                y.push(xr[best]);
                arg.push(row * len + best);
            }
        }
        drop(x);
        let total = n * c * len;
        Ok(Self::from_op(vec![n, c, out], y, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); total];
            for (&a, &gv) in arg.iter().zip(g) {
                gx[a] = gx[a] + gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Inverted dropout: zeroes each value with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        self.ensure_finite("dropout")?;
        if p == 0.0 {
            return self.reshape(&self.shape().to_vec());
        }
        let keep = T::lit(1.0 - p).recip();
        let mask: Vec<T> = (0..self.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let y = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(Self::from_op(self.shape().to_vec(), y, vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]
        }))
    }

    /// Gradient reversal: identity forward, gradient multiplied by `-lambda`
    /// backward.
    pub fn grad_reverse(&self, lambda: T) -> Result<Self> {
        if lambda < T::zero() {
            return Err(Error::invalid("grad_reverse", "negative lambda"));
        }
        Ok(Self::from_op(
            self.shape().to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |g| vec![Some(g.iter().map(|&v| -(lambda * v)).collect())],
        ))
    }
}
