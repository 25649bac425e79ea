use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, evaluated in `f64`.
///
/// Each coordinate is perturbed by `±h` in turn; the function must be pure.
pub fn finite_diff_grad<F>(mut f: F, point: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("step must be positive and finite, got {h}")));
    }
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Oracle(format!(
                "function is not finite around coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
