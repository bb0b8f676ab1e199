use rand::distr::{Distribution, Uniform};
use rand::Rng;

use super::{DiffArray, Scalar};
use crate::error::{Error, Result};

/// Fan-in / fan-out pair used by Xavier initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fans {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Fans {
    /// Fans implied by the parameter layouts used in this crate:
    /// `[n]` vectors, `[in, out]` dense weights and `[out, in, k]`
    /// convolution kernels.
    pub fn of_shape(shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid("xavier_init", format!("degenerate shape {shape:?}")));
        }
        Ok(match *shape {
            [n] => Fans { fan_in: n, fan_out: n },
            [fan_in, fan_out] => Fans { fan_in, fan_out },
            [out, inp, ref rest @ ..] => {
                let field: usize = rest.iter().product();
                Fans {
                    fan_in: inp * field,
                    fan_out: out * field,
                }
            }
            [] => unreachable!(),
        })
    }

    /// Half-width `sqrt(6 / (fan_in + fan_out))` of the uniform range.
    pub fn limit(&self) -> f64 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
    }
}

/// Trainable array drawn from `U[-L, L]`, `L = sqrt(6 / (fan_in + fan_out))`,
/// with fans derived from the shape.
pub fn xavier_init<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Result<DiffArray<T>> {
    let fans = Fans::of_shape(shape)?;
    xavier_init_with_fans(shape, fans, rng)
}

pub fn xavier_init_with_fans<T: Scalar>(
    shape: &[usize],
    fans: Fans,
    rng: &mut impl Rng,
) -> Result<DiffArray<T>> {
    if shape.is_empty() || shape.contains(&0) || fans.fan_in + fans.fan_out == 0 {
        return Err(Error::invalid("xavier_init", format!("degenerate shape {shape:?}")));
    }
    let limit = fans.limit();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    DiffArray::param(shape, data)
}
