use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if any
/// gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Usage(format!(
                "adam: parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let step = state.step + 1;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "training error at optimizer step {step}: non-finite gradient in parameter {i}"
        )));
    }

    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_b2 = T::from_f64(1.0 - cfg.beta2);
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = step;
    Ok(())
}
