//! Dense row-major tensors and the hand-written kernels the network needs.
//!
//! Every kernel is generic over [`Real`] so the same code path runs in
//! `f32` for training and in `f64` when checked against finite differences.

mod adam;
mod conv;
mod finite_diff;
mod linear;
mod mfm;
mod pool;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{config_err, Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_extent, ConvCache, ConvGrads};
pub use finite_diff::finite_diff_grad;
pub use linear::{linear_backward, linear_forward, LinearCache, LinearGrads};
pub use mfm::{mfm_backward, mfm_forward, MfmCache};
pub use pool::{maxpool2_backward, maxpool2_forward, PoolCache};

/// Floating-point element type usable by every kernel.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` for row/column-strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                // SAFETY: the spans checked above bound every element the
                // routine touches, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense n-dimensional array, contiguous and row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(config_err!("tensor extents must be positive, got {shape:?}"));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(config_err!(
                "shape {shape:?} holds {count} elements but {} were supplied",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); count],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let count = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..count).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(config_err!("expected a rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    /// Splits a rank-2 shape into `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(config_err!("expected a rank-2 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != self.data.len() || shape.contains(&0) {
            return Err(config_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error naming `what` if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "non-finite value {:?} at flat index {i} in {what}",
                self.data[i]
            ))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(config_err!("cannot add {:?} to {:?}", other.shape, self.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Rows `[start, end)` of the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = self.shape[0];
        if start >= end || end > outer {
            return Err(config_err!("row range {start}..{end} out of bounds for {outer} rows"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Concatenates along the leading axis.
    pub fn concat_outer(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| config_err!("nothing to concatenate"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(config_err!("cannot concatenate {:?} with {:?}", p.shape, first.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }
}

/// Finiteness check run after every kernel in debug builds.
#[inline]
pub(crate) fn debug_check_finite<T: Real>(t: &Tensor<T>, kernel: &str) -> Result<()> {
    if cfg!(debug_assertions) {
        t.check_finite(kernel)
    } else {
        Ok(())
    }
}
