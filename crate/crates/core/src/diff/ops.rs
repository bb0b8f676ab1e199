//! Elementwise, reduction and matrix primitives.

use super::{DiffArray, Scalar};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &DiffArray<T>, b: &DiffArray<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    a.ensure_finite(op)?;
    b.ensure_finite(op)
}

fn matrix_dims<T: Scalar>(op: &'static str, a: &DiffArray<T>) -> Result<(usize, usize)> {
    match *a.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(
            op,
            format!("expected a 2-D array, got shape {:?}", a.shape()),
        )),
    }
}

impl<T: Scalar> DiffArray<T> {
    /// Elementwise map with derivative `dfdx(x, y)` expressed through the
    /// input `x` and output `y`.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        dfdx: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Self> {
        self.ensure_finite(op)?;
        let x = self.to_vec();
        let y: Vec<T> = x.iter().map(|&v| f(v)).collect();
        let y_saved = y.clone();
        Ok(Self::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            move |g| {
                let gx = g
                    .iter()
                    .zip(x.iter().zip(&y_saved))
                    .map(|(&g, (&x, &y))| g * dfdx(x, y))
                    .collect();
                vec![Some(gx)]
            },
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape("add", self, other)?;
        let y = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_shape("sub", self, other)?;
        let y = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        same_shape("mul", self, other)?;
        let a = self.to_vec();
        let b = other.to_vec();
        let y = a.iter().zip(&b).map(|(&a, &b)| a * b).collect();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(Self::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = ra.then(|| g.iter().zip(&b).map(|(&g, &b)| g * b).collect());
                let gb = rb.then(|| g.iter().zip(&a).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            },
        ))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, scale: T, shift: T) -> Result<Self> {
        self.unary("affine", |x| scale * x + shift, move |_, _| scale)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.affine(s, T::zero())
    }

    pub fn neg(&self) -> Result<Self> {
        self.affine(-T::one(), T::zero())
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn ln(&self) -> Result<Self> {
        if self.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::invalid("ln", "non-positive input"));
        }
        self.unary("ln", |x| x.ln(), |x, _| x.recip())
    }

    /// `x^p`; inputs must be strictly positive.
    pub fn powf(&self, p: T) -> Result<Self> {
        if self.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::invalid("powf", "non-positive input"));
        }
        self.unary("powf", |x| x.powf(p), move |x, y| p * y / x)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(
            "relu",
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Clamp into `[lo, hi]`; the gradient passes only where the input lies
    /// inside the closed interval.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        if lo > hi {
            return Err(Error::invalid("clamp", "lo > hi"));
        }
        self.unary(
            "clamp",
            |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(&self) -> Result<Self> {
        self.ensure_finite("sum")?;
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        let n = self.len();
        Ok(Self::from_op(Vec::new(), vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        }))
    }

    pub fn mean(&self) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let n = T::from_usize(self.len()).unwrap();
        self.sum()?.scale(n.recip())
    }

    /// Row sums of a 2-D array: `[r, c] -> [r]`.
    pub fn sum_rows(&self) -> Result<Self> {
        let (r, c) = matrix_dims("sum_rows", self)?;
        self.ensure_finite("sum_rows")?;
        let y = self
            .data()
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
            .collect::<Vec<_>>();
        let y = if c == 0 { vec![T::zero(); r] } else { y };
        Ok(Self::from_op(vec![r], y, vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(r * c);
            for &gi in g {
                gx.extend(std::iter::repeat_n(gi, c));
            }
            vec![Some(gx)]
        }))
    }

    /// Column means of a 2-D array: `[r, c] -> [1, c]`.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = matrix_dims("mean_rows", self)?;
        if r == 0 {
            return Err(Error::Empty("mean_rows input"));
        }
        self.ensure_finite("mean_rows")?;
        let inv = T::from_usize(r).unwrap().recip();
        let mut y = vec![T::zero(); c];
        for row in self.data().chunks(c) {
            y.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
        }
        y.iter_mut().for_each(|v| *v = *v * inv);
        Ok(Self::from_op(vec![1, c], y, vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(r * c);
            for _ in 0..r {
                gx.extend(g.iter().map(|&v| v * inv));
            }
            vec![Some(gx)]
        }))
    }

    /// Reinterprets the storage with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Self::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = matrix_dims("matmul", self)?;
        let (k2, n) = matrix_dims("matmul", other)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        self.ensure_finite("matmul")?;
        other.ensure_finite("matmul")?;
        let mut y = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data(),
            k as isize,
            1,
            &other.data(),
            n as isize,
            1,
            T::zero(),
            &mut y,
            n as isize,
            1,
        );
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::from_op(
            vec![m, n],
            y,
            vec![self.clone(), other.clone()],
            move |g| {
                // dA = G·Bᵀ, dB = Aᵀ·G
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        &b.data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut ga,
                        k as isize,
                        1,
                    );
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &a.data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::zero(),
                        &mut gb,
                        n as isize,
                        1,
                    );
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Transpose of a 2-D array.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = matrix_dims("transpose", self)?;
        let x = self.data();
        let mut y = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                y[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Ok(Self::from_op(vec![c, r], y, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates 2-D arrays along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("concat input"))?;
        let (r0, c0) = matrix_dims("concat", first)?;
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| matrix_dims("concat", p))
            .collect::<Result<_>>()?;
        for p in parts {
            p.ensure_finite("concat")?;
        }
        match axis {
            0 => {
                if let Some(p) = parts.iter().find(|p| p.shape()[1] != c0) {
                    return Err(Error::shape("concat", first.shape(), p.shape()));
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut y = Vec::with_capacity(rows * c0);
                for p in parts {
                    y.extend_from_slice(&p.data());
                }
                let sizes: Vec<usize> = dims.iter().map(|d| d.0 * c0).collect();
                Ok(Self::from_op(
                    vec![rows, c0],
                    y,
                    parts.to_vec(),
                    move |g| {
                        let mut off = 0;
                        sizes
                            .iter()
                            .map(|&s| {
                                let part = g[off..off + s].to_vec();
                                off += s;
                                Some(part)
                            })
                            .collect()
                    },
                ))
            }
            1 => {
                if let Some(p) = parts.iter().find(|p| p.shape()[0] != r0) {
                    return Err(Error::shape("concat", first.shape(), p.shape()));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut y = vec![T::zero(); r0 * cols];
                let mut off = 0;
                for (p, &(_, c)) in parts.iter().zip(&dims) {
                    let x = p.data();
                    for i in 0..r0 {
                        y[i * cols + off..i * cols + off + c].copy_from_slice(&x[i * c..(i + 1) * c]);
                    }
                    off += c;
                }
                let widths: Vec<usize> = dims.iter().map(|d| d.1).collect();
                Ok(Self::from_op(
                    vec![r0, cols],
                    y,
                    parts.to_vec(),
                    move |g| {
                        let mut off = 0;
                        widths
                            .iter()
                            .map(|&c| {
                                let mut part = Vec::with_capacity(r0 * c);
                                for i in 0..r0 {
                                    part.extend_from_slice(&g[i * cols + off..i * cols + off + c]);
                                }
                                off += c;
                                Some(part)
                            })
                            .collect()
                    },
                ))
            }
            _ => Err(Error::invalid("concat", format!("axis {axis} out of range"))),
        }
    }

    /// Rows `[start, end)` along the first axis of any array.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = *self.shape().first().ok_or(Error::invalid("slice_rows", "scalar input"))?;
        if start > end || end > rows {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{end} outside {rows} rows"),
            ));
        }
        let stride = self.len() / rows.max(1);
        let y = self.data()[start * stride..end * stride].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        let total = self.len();
        Ok(Self::from_op(shape, y, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); total];
            gx[start * stride..end * stride].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Adds a length-`c` vector to every row of an `[r, c]` array.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let (r, c) = matrix_dims("add_bias", self)?;
        if bias.shape() != [c] {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        self.ensure_finite("add_bias")?;
        bias.ensure_finite("add_bias")?;
        let b = bias.to_vec();
        let mut y = self.to_vec();
        for row in y.chunks_mut(c.max(1)) {
            row.iter_mut().zip(&b).for_each(|(y, &b)| *y = *y + b);
        }
        Ok(Self::from_op(
            vec![r, c],
            y,
            vec![self.clone(), bias.clone()],
            move |g| {
                let mut gb = vec![T::zero(); c];
                for row in g.chunks(c.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    /// `y[i, j] = x[i, j] * v[i]` for `x: [r, c]`, `v: [r]`.
    pub fn scale_rows(&self, v: &Self) -> Result<Self> {
        let (r, c) = matrix_dims("scale_rows", self)?;
        if v.shape() != [r] {
            return Err(Error::shape("scale_rows", self.shape(), v.shape()));
        }
        self.ensure_finite("scale_rows")?;
        v.ensure_finite("scale_rows")?;
        let x = self.to_vec();
        let s = v.to_vec();
        let mut y = x.clone();
        for (row, &si) in y.chunks_mut(c.max(1)).zip(&s) {
            row.iter_mut().for_each(|v| *v = *v * si);
        }
        let (rx, rv) = (self.requires_grad(), v.requires_grad());
        Ok(Self::from_op(
            vec![r, c],
            y,
            vec![self.clone(), v.clone()],
            move |g| {
                let gx = rx.then(|| {
                    let mut gx = g.to_vec();
                    for (row, &si) in gx.chunks_mut(c.max(1)).zip(&s) {
                        row.iter_mut().for_each(|v| *v = *v * si);
                    }
                    gx
                });
                let gv = rv.then(|| {
                    (0..r)
                        .map(|i| {
                            (0..c).fold(T::zero(), |a, j| a + g[i * c + j] * x[i * c + j])
                        })
                        .collect()
                });
                vec![gx, gv]
            },
        ))
    }

    /// `y[i, j] = x[i, j] * v[j]` for `x: [r, c]`, `v: [c]`.
    pub fn scale_cols(&self, v: &Self) -> Result<Self> {
        let (r, c) = matrix_dims("scale_cols", self)?;
        if v.shape() != [c] {
            return Err(Error::shape("scale_cols", self.shape(), v.shape()));
        }
        self.ensure_finite("scale_cols")?;
        v.ensure_finite("scale_cols")?;
        let x = self.to_vec();
        let s = v.to_vec();
        let mut y = x.clone();
        for row in y.chunks_mut(c.max(1)) {
            row.iter_mut().zip(&s).for_each(|(v, &sj)| *v = *v * sj);
        }
        let (rx, rv) = (self.requires_grad(), v.requires_grad());
        Ok(Self::from_op(
            vec![r, c],
            y,
            vec![self.clone(), v.clone()],
            move |g| {
                let gx = rx.then(|| {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_mut(c.max(1)) {
                        row.iter_mut().zip(&s).for_each(|(v, &sj)| *v = *v * sj);
                    }
                    gx
                });
                let gv = rv.then(|| {
                    let mut gv = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] = gv[j] + g[i * c + j] * x[i * c + j];
                        }
                    }
                    gv
                });
                vec![gx, gv]
            },
        ))
    }

    /// Divides every row of a 2-D array by its L2 norm. All-zero rows stay
    /// zero and pass no gradient.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let (r, c) = matrix_dims("l2_normalize_rows", self)?;
        self.ensure_finite("l2_normalize_rows")?;
        let x = self.to_vec();
        let norms: Vec<T> = x
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect();
        let mut y = x;
        for (row, &n) in y.chunks_mut(c.max(1)).zip(&norms) {
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v = *v / n);
            }
        }
        let y_saved = y.clone();
        Ok(Self::from_op(vec![r, c], y, vec![self.clone()], move |g| {
            // d(x/|x|) = (g - y (y·g)) / |x|
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                let n = norms[i];
                if n <= T::zero() {
                    continue;
                }
                let yr = &y_saved[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                for j in 0..c {
                    gx[i * c + j] = (gr[j] - yr[j] * dot) / n;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Pairwise squared Euclidean distances between the rows of `self`
    /// (`[n, d]`) and `other` (`[m, d]`), giving `[n, m]`.
    pub fn sq_dist(&self, other: &Self) -> Result<Self> {
        let (n, d) = matrix_dims("sq_dist", self)?;
        let (m, d2) = matrix_dims("sq_dist", other)?;
        if d != d2 {
            return Err(Error::shape("sq_dist", self.shape(), other.shape()));
        }
        self.ensure_finite("sq_dist")?;
        other.ensure_finite("sq_dist")?;
        let x = self.to_vec();
        let z = other.to_vec();
        let mut y = vec![T::zero(); n * m];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            for j in 0..m {
                let zj = &z[j * d..(j + 1) * d];
                y[i * m + j] = xi
                    .iter()
                    .zip(zj)
                    .fold(T::zero(), |a, (&p, &q)| a + (p - q) * (p - q));
            }
        }
        let (rx, rz) = (self.requires_grad(), other.requires_grad());
        Ok(Self::from_op(
            vec![n, m],
            y,
            vec![self.clone(), other.clone()],
            move |g| {
                let two = T::lit(2.0);
                let mut gx = rx.then(|| vec![T::zero(); n * d]);
                let mut gz = rz.then(|| vec![T::zero(); m * d]);
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j] * two;
                        if gij == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let diff = gij * (x[i * d + k] - z[j * d + k]);
                            if let Some(gx) = gx.as_mut() {
                                gx[i * d + k] = gx[i * d + k] + diff;
                            }
                            if let Some(gz) = gz.as_mut() {
                                gz[j * d + k] = gz[j * d + k] - diff;
                            }
                        }
                    }
                }
                vec![gx, gz]
            },
        ))
    }

    /// Row-wise softmax of a 2-D array.
    pub fn softmax(&self) -> Result<Self> {
        let (r, c) = matrix_dims("softmax", self)?;
        self.ensure_finite("softmax")?;
        let mut y = self.to_vec();
        for row in y.chunks_mut(c.max(1)) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let y_saved = y.clone();
        Ok(Self::from_op(vec![r, c], y, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                let yr = &y_saved[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                for j in 0..c {
                    gx[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Row-wise log-softmax of a 2-D array.
    pub fn log_softmax(&self) -> Result<Self> {
        let (r, c) = matrix_dims("log_softmax", self)?;
        self.ensure_finite("log_softmax")?;
        let mut y = self.to_vec();
        for row in y.chunks_mut(c.max(1)) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let y_saved = y.clone();
        Ok(Self::from_op(vec![r, c], y, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                let yr = &y_saved[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let gsum = gr.iter().fold(T::zero(), |a, &b| a + b);
                for j in 0..c {
                    gx[i * c + j] = gr[j] - yr[j].exp() * gsum;
                }
            }
            vec![Some(gx)]
        }))
    }
}
