use super::{debug_check_finite, Real, Tensor};
use crate::error::{config_err, Error, Result};

/// Output extent of a convolution along one axis, or `None` if the kernel
/// does not fit the padded input.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// State retained by [`conv2d_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T = f32> {
    input: Tensor<T>,
    geom: Geometry,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn geometry<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(config_err!("conv2d: input has {c} channels but weight expects {wc}"));
    }
    if bias.shape() != [o] {
        return Err(config_err!(
            "conv2d: bias shape {:?} does not match {o} output channels",
            bias.shape()
        ));
    }
    let oh = conv_output_extent(h, kh, stride, pad);
    let ow = conv_output_extent(w, kw, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Geometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        }),
        _ => Err(config_err!(
            "conv2d: kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {h}x{w}"
        )),
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kj - pad` lies
/// inside `0..w`.
fn valid_columns(g: &Geometry, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.ow);
    let hi = (g.w + g.pad).saturating_sub(kj).div_ceil(g.stride).clamp(lo, g.ow);
    (lo, hi)
}

/// Unfolds one sample (`c x h x w`) into a `patch x positions` matrix.
fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_columns(g, kj);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki).wrapping_sub(g.pad);
                    if iy >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

/// Folds a `patch x positions` matrix back onto one sample, accumulating overlaps.
fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_columns(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki).wrapping_sub(g.pad);
                    if iy >= g.h || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding and a per-output-channel bias.
///
/// `input` is `N x C x H x W`, `weight` is `O x C x kh x kw`, `bias` is `O`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let g = geometry(input, weight, bias, stride, pad)?;
    let (k, p) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut cols = vec![T::zero(); k * p];
    let sample = g.c * g.h * g.w;
    for ni in 0..g.n {
        im2col(&input.data()[ni * sample..(ni + 1) * sample], &g, &mut cols);
        let dst = &mut out[ni * g.o * p..(ni + 1) * g.o * p];
        for (oc, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[oc]);
        }
        T::gemm(
            g.o,
            k,
            p,
            T::one(),
            weight.data(),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            T::one(),
            dst,
            (p as isize, 1),
        );
    }
    let out = Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)?;
    debug_check_finite(&out, "conv2d")?;
    Ok((
        out,
        ConvCache {
            input: input.clone(),
            geom: g,
        },
    ))
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient `d_out`.
///
/// Per-sample weight gradients are accumulated in sample order, so the
/// result does not depend on anything but the inputs.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    d_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = cache.geom;
    if weight.shape() != [g.o, g.c, g.kh, g.kw] {
        return Err(Error::Usage(format!(
            "conv2d backward: weight shape {:?} differs from the cached forward",
            weight.shape()
        )));
    }
    if d_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::Usage(format!(
            "conv2d backward: upstream gradient {:?} does not match forward output {:?}",
            d_out.shape(),
            [g.n, g.o, g.oh, g.ow]
        )));
    }
    let (k, p) = (g.patch(), g.positions());
    let sample = g.c * g.h * g.w;
    let mut d_weight = vec![T::zero(); g.o * k];
    let mut d_bias = vec![T::zero(); g.o];
    let mut d_input = need_input_grad.then(|| vec![T::zero(); g.n * sample]);
    let mut cols = vec![T::zero(); k * p];
    let mut d_cols = vec![T::zero(); k * p];

    for ni in 0..g.n {
        let dy = &d_out.data()[ni * g.o * p..(ni + 1) * g.o * p];
        for (oc, row) in dy.chunks_exact(p).enumerate() {
            d_bias[oc] = row.iter().fold(d_bias[oc], |acc, &v| acc + v);
        }
        im2col(&cache.input.data()[ni * sample..(ni + 1) * sample], &g, &mut cols);
        // dW += dY (O x P) * cols^T (P x K)
        T::gemm(
            g.o,
            p,
            k,
            T::one(),
            dy,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            T::one(),
            &mut d_weight,
            (k as isize, 1),
        );
        if let Some(dx) = d_input.as_mut() {
            // dcols = W^T (K x O) * dY (O x P)
            T::gemm(
                k,
                g.o,
                p,
                T::one(),
                weight.data(),
                (1, k as isize),
                dy,
                (p as isize, 1),
                T::zero(),
                &mut d_cols,
                (p as isize, 1),
            );
            col2im(&d_cols, &g, &mut dx[ni * sample..(ni + 1) * sample]);
        }
    }

    let grads = ConvGrads {
        input: d_input
            .map(|dx| Tensor::new(vec![g.n, g.c, g.h, g.w], dx))
            .transpose()?,
        weight: Tensor::new(vec![g.o, g.c, g.kh, g.kw], d_weight)?,
        bias: Tensor::new(vec![g.o], d_bias)?,
    };
    debug_check_finite(&grads.weight, "conv2d backward")?;
    Ok(grads)
}
