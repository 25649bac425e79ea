//! The three training losses and their weighted combination.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the network outputs it reads. An empty sub-batch (a tensor with
//! zero rows) makes the corresponding term inactive: value 0, zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Openness threshold separating open from closed on the raw degree.
    pub ot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 1.0,
            lambda3: 1.0,
            ot: 15.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.ot > 0.0 && self.ot.is_finite()) {
            return Err(config_err!("ot must be positive, got {}", self.ot));
        }
        Ok(())
    }
}

/// Value and gradient of one loss term.
#[derive(Clone, Debug)]
pub struct LossTerm<T = f32> {
    pub value: f64,
    /// False when the term had no data to act on.
    pub active: bool,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DistributionTerm<T = f32> {
    pub value: f64,
    pub active: bool,
    pub grad_syn: Tensor<T>,
    pub grad_real: Tensor<T>,
}

fn rows<T: Real>(t: &Tensor<T>) -> usize {
    t.shape().first().copied().unwrap_or(0)
}

fn check_scalar_head<T: Real>(o2: &Tensor<T>, labels: &[f64], what: &str) -> Result<usize> {
    let n = rows(o2);
    if o2.rank() != 2 || o2.shape()[1] != 1 {
        return Err(config_err!("{what}: expected an N x 1 output, got {:?}", o2.shape()));
    }
    if labels.len() != n {
        return Err(data_err!("{what}: {n} outputs but {} labels", labels.len()));
    }
    Ok(n)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean squared error between degree outputs and degree labels.
pub fn loss1_mse<T: Real>(o2_syn: &Tensor<T>, labels: &[f64]) -> Result<LossTerm<T>> {
    let n = check_scalar_head(o2_syn, labels, "loss1")?;
    let mut grad = Tensor::zeros(o2_syn.shape());
    if n == 0 {
        return Ok(LossTerm {
            value: 0.0,
            active: false,
            grad,
        });
    }
    let nf = n as f64;
    let mut sum = 0.0;
    for ((g, &o), &l) in grad.data_mut().iter_mut().zip(o2_syn.data()).zip(labels) {
        let diff = o.as_f64() - l;
        sum += diff * diff;
        *g = T::from_f64(2.0 * diff / nf);
    }
    Ok(LossTerm {
        value: sum / nf,
        active: true,
        grad,
    })
}

/// Binary loss: closed samples are pulled to 0, open samples pushed above `ot`.
pub fn loss2_binary<T: Real>(o2_real: &Tensor<T>, labels: &[f64], ot: f64) -> Result<LossTerm<T>> {
    let n = check_scalar_head(o2_real, labels, "loss2")?;
    if let Some(bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(data_err!("loss2: binary labels must be 0 or 1, got {bad}"));
    }
    let mut grad = Tensor::zeros(o2_real.shape());
    if n == 0 {
        return Ok(LossTerm {
            value: 0.0,
            active: false,
            grad,
        });
    }
    let nf = n as f64;
    let mut sum = 0.0;
    for ((g, &o), &l) in grad.data_mut().iter_mut().zip(o2_real.data()).zip(labels) {
        let o = o.as_f64();
        let d = if l == 0.0 {
            sum += o * o;
            2.0 * o / nf
        } else if o < ot {
            sum += ot - o;
            -1.0 / nf
        } else {
            0.0
        };
        *g = T::from_f64(d);
    }
    Ok(LossTerm {
        value: sum / nf,
        active: true,
        grad,
    })
}

fn mean_var<T: Real>(x: &[T]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// `|mean_s - mean_r| + |var_s - var_r|` with scalar statistics over every
/// element of each sub-batch (population variance).
pub fn loss3_distribution<T: Real>(o1_syn: &Tensor<T>, o1_real: &Tensor<T>) -> Result<DistributionTerm<T>> {
    if o1_syn.rank() != 2 || o1_real.rank() != 2 || o1_syn.shape()[1] != o1_real.shape()[1] {
        return Err(config_err!(
            "loss3: feature batches {:?} and {:?} are not compatible",
            o1_syn.shape(),
            o1_real.shape()
        ));
    }
    let mut grad_syn = Tensor::zeros(o1_syn.shape());
    let mut grad_real = Tensor::zeros(o1_real.shape());
    if o1_syn.is_empty() || o1_real.is_empty() {
        return Ok(DistributionTerm {
            value: 0.0,
            active: false,
            grad_syn,
            grad_real,
        });
    }
    let (ms, vs) = mean_var(o1_syn.data());
    let (mr, vr) = mean_var(o1_real.data());
    let (sm, sv) = (sign(ms - mr), sign(vs - vr));
    let ns = o1_syn.len() as f64;
    let nr = o1_real.len() as f64;
    for (g, &x) in grad_syn.data_mut().iter_mut().zip(o1_syn.data()) {
        *g = T::from_f64(sm / ns + sv * 2.0 * (x.as_f64() - ms) / ns);
    }
    for (g, &x) in grad_real.data_mut().iter_mut().zip(o1_real.data()) {
        *g = T::from_f64(-sm / nr - sv * 2.0 * (x.as_f64() - mr) / nr);
    }
    Ok(DistributionTerm {
        value: (ms - mr).abs() + (vs - vr).abs(),
        active: true,
        grad_syn,
        grad_real,
    })
}

/// Network outputs of one mixed batch, split by domain.
#[derive(Clone, Copy, Debug)]
pub struct BatchOutputs<'a, T = f32> {
    pub o1_syn: &'a Tensor<T>,
    pub o2_syn: &'a Tensor<T>,
    pub labels_syn: &'a [f64],
    pub o1_real: &'a Tensor<T>,
    pub o2_real: &'a Tensor<T>,
    pub labels_real: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct CombinedLoss<T = f32> {
    pub total: f64,
    /// Unweighted term values; inactive terms read 0.
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub d_o1_syn: Tensor<T>,
    pub d_o2_syn: Tensor<T>,
    pub d_o1_real: Tensor<T>,
    pub d_o2_real: Tensor<T>,
}

fn scaled<T: Real>(t: Tensor<T>, k: f64) -> Tensor<T> {
    let k = T::from_f64(k);
    t.map(|v| v * k)
}

/// `lambda1 * loss1 + lambda2 * loss2 + lambda3 * loss3`.
pub fn combined_loss<T: Real>(b: BatchOutputs<'_, T>, w: &LossWeights) -> Result<CombinedLoss<T>> {
    w.validate()?;
    if rows(b.o2_syn) == 0 && rows(b.o2_real) == 0 {
        return Err(config_err!("combined loss needs at least one non-empty sub-batch"));
    }
    if rows(b.o1_syn) != rows(b.o2_syn) || rows(b.o1_real) != rows(b.o2_real) {
        return Err(config_err!("feature and degree heads disagree on the batch size"));
    }
    let l1 = loss1_mse(b.o2_syn, b.labels_syn)?;
    let l2 = loss2_binary(b.o2_real, b.labels_real, w.ot)?;
    let l3 = loss3_distribution(b.o1_syn, b.o1_real)?;
    let total = w.lambda1 * l1.value + w.lambda2 * l2.value + w.lambda3 * l3.value;
    if !total.is_finite() {
        return Err(crate::Error::Numeric(format!("combined loss is not finite ({total})")));
    }
    Ok(CombinedLoss {
        total,
        loss1: l1.value,
        loss2: l2.value,
        loss3: l3.value,
        d_o1_syn: scaled(l3.grad_syn, w.lambda3),
        d_o2_syn: scaled(l1.grad, w.lambda1),
        d_o1_real: scaled(l3.grad_real, w.lambda3),
        d_o2_real: scaled(l2.grad, w.lambda2),
    })
}
