use super::{debug_check_finite, Real, Tensor};
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug)]
pub struct LinearCache<T = f32> {
    input: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `y = x W^T + b` with `x: N x F`, `W: G x F`, `b: G`.
pub fn linear_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LinearCache<T>)> {
    let (n, f) = input.dims2()?;
    let (g, wf) = weight.dims2()?;
    if wf != f {
        return Err(config_err!("linear: input has {f} features but weight expects {wf}"));
    }
    if bias.shape() != [g] {
        return Err(config_err!(
            "linear: bias shape {:?} does not match {g} outputs",
            bias.shape()
        ));
    }
    let mut out = Vec::with_capacity(n * g);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        n,
        f,
        g,
        T::one(),
        input.data(),
        (f as isize, 1),
        weight.data(),
        (1, f as isize),
        T::one(),
        &mut out,
        (g as isize, 1),
    );
    let out = Tensor::new(vec![n, g], out)?;
    debug_check_finite(&out, "linear")?;
    Ok((out, LinearCache { input: input.clone() }))
}

pub fn linear_backward<T: Real>(
    cache: &LinearCache<T>,
    weight: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, f) = cache.input.dims2()?;
    let (g, wf) = weight.dims2()?;
    if wf != f || d_out.shape() != [n, g] {
        return Err(Error::Usage(format!(
            "linear backward: upstream {:?} / weight {:?} inconsistent with cached input {:?}",
            d_out.shape(),
            weight.shape(),
            cache.input.shape()
        )));
    }
    let dy = d_out.data();
    // dX = dY (N x G) * W (G x F)
    let mut dx = vec![T::zero(); n * f];
    T::gemm(
        n,
        g,
        f,
        T::one(),
        dy,
        (g as isize, 1),
        weight.data(),
        (f as isize, 1),
        T::zero(),
        &mut dx,
        (f as isize, 1),
    );
    // dW = dY^T (G x N) * X (N x F)
    let mut dw = vec![T::zero(); g * f];
    T::gemm(
        g,
        n,
        f,
        T::one(),
        dy,
        (1, g as isize),
        cache.input.data(),
        (f as isize, 1),
        T::zero(),
        &mut dw,
        (f as isize, 1),
    );
    let mut db = vec![T::zero(); g];
    for row in dy.chunks_exact(g) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![n, f], dx)?,
        weight: Tensor::new(vec![g, f], dw)?,
        bias: Tensor::new(vec![g], db)?,
    })
}
