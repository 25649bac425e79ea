use super::{debug_check_finite, Real, Tensor};
use crate::error::{config_err, Error, Result};

/// Which half won at every output position.
#[derive(Clone, Debug)]
pub struct MfmCache {
    input_shape: Vec<usize>,
    first_wins: Vec<bool>,
}

/// Max-Feature-Map: splits axis 1 into two halves and keeps their element-wise max.
///
/// Accepts `N x 2C x H x W` or `N x 2F`. On exact ties the first half wins.
pub fn mfm_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, MfmCache)> {
    let shape = input.shape();
    if !(shape.len() == 2 || shape.len() == 4) {
        return Err(config_err!("mfm expects a rank-2 or rank-4 tensor, got {shape:?}"));
    }
    let channels = shape[1];
    if !channels.is_multiple_of(2) {
        return Err(config_err!("mfm needs an even channel count, got {channels}"));
    }
    let half = channels / 2;
    let inner: usize = shape[2..].iter().product();
    let n = shape[0];
    let x = input.data();
    let mut out = Vec::with_capacity(n * half * inner);
    let mut first_wins = Vec::with_capacity(n * half * inner);
    for ni in 0..n {
        let base = ni * channels * inner;
        let (lo, hi) = x[base..base + channels * inner].split_at(half * inner);
        for (&a, &b) in lo.iter().zip(hi) {
            let first = a >= b;
            out.push(if first { a } else { b });
            first_wins.push(first);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[1] = half;
    let out = Tensor::new(out_shape, out)?;
    debug_check_finite(&out, "mfm")?;
    Ok((
        out,
        MfmCache {
            input_shape: shape.to_vec(),
            first_wins,
        },
    ))
}

pub fn mfm_backward<T: Real>(cache: &MfmCache, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if d_out.len() != cache.first_wins.len() {
        return Err(Error::Usage(format!(
            "mfm backward: upstream gradient has {} elements, forward produced {}",
            d_out.len(),
            cache.first_wins.len()
        )));
    }
    let n = cache.input_shape[0];
    let per_sample = cache.first_wins.len() / n;
    let mut dx = Tensor::zeros(&cache.input_shape);
    let buf = dx.data_mut();
    for ni in 0..n {
        let base = ni * 2 * per_sample;
        for k in 0..per_sample {
            let j = ni * per_sample + k;
            let dst = if cache.first_wins[j] {
                base + k
            } else {
                base + per_sample + k
            };
            buf[dst] = d_out.data()[j];
        }
    }
    Ok(dx)
}
