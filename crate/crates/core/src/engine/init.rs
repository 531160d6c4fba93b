use alloc::vec::Vec;

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{bail, Result};
use crate::seed;

/// Fan-in and fan-out of a weight of shape `[out, in, *receptive]`.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        bail!(InvalidArgument, "xavier init needs at least 2 dimensions, got {:?}", shape);
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    if fan_in == 0 || fan_out == 0 {
        bail!(InvalidArgument, "zero fan for shape {:?}", shape);
    }
    Ok((fan_in, fan_out))
}

/// Glorot uniform sample: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let (fi, fo) = fans(shape)?;
    let bound = libm::sqrt(6.0 / (fi + fo) as f64);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data)
}

pub fn xavier_init<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    xavier_uniform(shape, &mut seed::rng(seed))
}
