//! Gradient reversal, the domain discriminator and its binary
//! cross-entropy objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffArray, Role, Scalar, ParamGroup};
use crate::error::{Error, Result};
use crate::layers::Dense;

/// Lower/upper clamp applied to discriminator probabilities before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    Constant,
    /// `λ(p) = λ · (2 / (1 + e^{-10p}) − 1)` over training progress `p ∈ [0, 1]`.
    Progressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlConfig {
    pub lambda: f64,
    pub schedule: GrlSchedule,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            schedule: GrlSchedule::Constant,
        }
    }
}

impl GrlConfig {
    pub fn lambda_at(&self, progress: f64) -> f64 {
        match self.schedule {
            GrlSchedule::Constant => self.lambda,
            GrlSchedule::Progressive => {
                let p = progress.clamp(0.0, 1.0);
                self.lambda * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
            }
        }
    }
}

/// Identity forward; multiplies the incoming gradient by `-λ(progress)`.
pub fn grl<T: Scalar>(x: &DiffArray<T>, config: &GrlConfig, progress: f64) -> Result<DiffArray<T>> {
    if !(config.lambda >= 0.0) {
        return Err(Error::invalid("grl", "lambda must be non-negative"));
    }
    x.grad_reverse(T::lit(config.lambda_at(progress)))
}

/// Domain classifier `256 → 128 → 128 → 1`: two ReLU + dropout(0.5)
/// hidden layers and a sigmoid output. Source is labelled 1, target 0.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    pub fc2: Dense<T>,
    pub fc3: Dense<T>,
    pub fc4: Dense<T>,
    pub dropout: f64,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc2: Dense::new(input, hidden, rng)?,
            fc3: Dense::new(hidden, hidden, rng)?,
            fc4: Dense::new(hidden, 1, rng)?,
            dropout: 0.5,
        })
    }

    pub fn input_width(&self) -> usize {
        self.fc2.input_width()
    }

    /// `features: [n, input]` → probabilities `[n]`.
    pub fn forward(&self, features: &DiffArray<T>, train: bool, rng: &mut impl Rng) -> Result<DiffArray<T>> {
        match *features.shape() {
            [_, w] if w == self.input_width() => {}
            _ => return Err(Error::shape("discriminator", features.shape(), self.fc2.weight.shape())),
        }
        let n = features.shape()[0];
        let mut h = self.fc2.forward(features)?.relu()?;
        if train {
            h = h.dropout(self.dropout, rng)?;
        }
        let mut h = self.fc3.forward(&h)?.relu()?;
        if train {
            h = h.dropout(self.dropout, rng)?;
        }
        self.fc4.forward(&h)?.sigmoid()?.reshape(&[n])
    }

    pub fn params(&self) -> Vec<(String, DiffArray<T>)> {
        vec![
            ("fc2.weight".into(), self.fc2.weight.clone()),
            ("fc2.bias".into(), self.fc2.bias.clone()),
            ("fc3.weight".into(), self.fc3.weight.clone()),
            ("fc3.bias".into(), self.fc3.bias.clone()),
            ("fc4.weight".into(), self.fc4.weight.clone()),
            ("fc4.bias".into(), self.fc4.bias.clone()),
        ]
    }

    pub fn param_group(&self) -> Result<ParamGroup<T>> {
        let mut g = ParamGroup::new("discriminator", Role::Discriminator);
        for (name, p) in self.params() {
            g.push(name, p)?;
        }
        Ok(g)
    }
}

/// `mean(-ln p_s) + mean(-ln(1 - p_t))` with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn domain_adversarial_loss<T: Scalar>(source_probs: &DiffArray<T>, target_probs: &DiffArray<T>) -> Result<DiffArray<T>> {
    if source_probs.is_empty() || target_probs.is_empty() {
        return Err(Error::Empty("discriminator output"));
    }
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let src = source_probs.clamp(lo, hi)?.ln()?.mean()?.neg()?;
    let tgt = target_probs
        .clamp(lo, hi)?
        .affine(-T::one(), T::one())?
        .ln()?
        .mean()?
        .neg()?;
    src.add(&tgt)
}
