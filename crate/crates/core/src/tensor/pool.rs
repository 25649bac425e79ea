use super::{debug_check_finite, Real, Tensor};
use crate::error::{config_err, Error, Result};

/// Argmax routing recorded by [`maxpool2_forward`].
#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    /// Flat input index of each output element's winner.
    argmax: Vec<usize>,
}

impl PoolCache {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2x2 max pooling with stride 2. An odd trailing row or column is dropped;
/// ties go to the lowest linear index in the window.
pub fn maxpool2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let (n, c, h, w) = input.dims4()?;
    if h < 2 || w < 2 {
        return Err(config_err!("maxpool2 needs H, W >= 2, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(vec![n, c, oh, ow], out)?;
    debug_check_finite(&out, "maxpool2")?;
    Ok((
        out,
        PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Real>(cache: &PoolCache, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if d_out.len() != cache.argmax.len() {
        return Err(Error::Usage(format!(
            "maxpool2 backward: upstream gradient has {} elements, forward produced {}",
            d_out.len(),
            cache.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&cache.input_shape);
    let buf = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(d_out.data()) {
        buf[idx] = buf[idx] + g;
    }
    Ok(dx)
}
