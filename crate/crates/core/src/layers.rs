//! Stateful building blocks shared by the feature extractor, the
//! discriminator and the classifier.

use rand::Rng;

use crate::diff::{xavier_init, DiffArray, Padding, Scalar};
use crate::error::{Error, Result};

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense<T: Scalar> {
    pub weight: DiffArray<T>,
    pub bias: DiffArray<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: xavier_init(&[input, output], rng)?,
            bias: DiffArray::param(&[output], vec![T::zero(); output])?,
        })
    }

    pub fn input_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &DiffArray<T>) -> Result<DiffArray<T>> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d<T: Scalar> {
    pub weight: DiffArray<T>,
    pub bias: DiffArray<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: xavier_init(&[out_channels, in_channels, kernel], rng)?,
            bias: DiffArray::param(&[out_channels], vec![T::zero(); out_channels])?,
            stride,
            padding: Padding::Same,
        })
    }

    pub fn forward(&self, x: &DiffArray<T>) -> Result<DiffArray<T>> {
        x.conv1d(&self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

/// Batch normalization with learnable scale/shift and running statistics
/// for evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: DiffArray<T>,
    pub beta: DiffArray<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    /// γ = 1, β = 0, momentum 0.1, ε = 1e-5.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: DiffArray::param(&[channels], vec![T::one(); channels])?,
            beta: DiffArray::param(&[channels], vec![T::zero(); channels])?,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode normalizes with batch statistics and folds them into
    /// the running estimates (variance with Bessel's correction);
    /// evaluation mode uses the running estimates.
    pub fn forward(&mut self, x: &DiffArray<T>, train: bool) -> Result<DiffArray<T>> {
        let eps = T::lit(self.eps);
        if !train {
            return x.batch_norm_eval(
                &self.gamma,
                &self.beta,
                &self.running_mean,
                &self.running_var,
                eps,
            );
        }
        let (y, stats) = x.batch_norm(&self.gamma, &self.beta, eps)?;
        let m = T::lit(self.momentum);
        let one = T::one();
        let bessel = T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap();
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (one - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (one - m) * *r + m * b * bessel;
        }
        Ok(y)
    }
}

/// Converts `[n]` class indices to an `[n, classes]` one-hot constant.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<DiffArray<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(
                "one_hot",
                format!("label {l} out of range for {classes} classes"),
            ));
        }
        data[i * classes + l] = T::one();
    }
    DiffArray::new(&[labels.len(), classes], data)
}
