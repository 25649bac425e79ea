//! Mixed-domain batching, the training loop, fine-tuning on degree-labeled
//! pseudo-real crops, and the gradient-check suite.

mod config;
mod gradcheck;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::losses::{combined_loss, BatchOutputs};
use crate::net::{MfmNet, NetParams};
use crate::scene::{Dataset, LabelKind};
use crate::tensor::{adam_step, AdamState, Tensor};
use crate::util::{derive_seed, mix64};

pub use config::{TrainConfig, TrainMode, CONFIG_KEYS};
pub use gradcheck::{gradcheck_suite, gradcheck_suite_with, ComponentCheck, GradcheckReport, Kernels};

/// Sample indices of one batch, per pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub syn: Vec<usize>,
    pub real: Vec<usize>,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, epoch as u64), stream))
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Batch composition for one epoch.
///
/// Joint batches take `floor(real_fraction * batch_size)` real samples and
/// fill the rest from the synthetic pool; an epoch is one pass over the
/// synthetic pool and the real pool cycles, reshuffled on every wrap. Single
/// domain modes draw whole batches from their one pool. Partial final
/// batches are dropped.
pub fn make_mixed_batches(n_syn: usize, n_real: usize, cfg: &TrainConfig, epoch: usize) -> Result<Vec<BatchPlan>> {
    cfg.validate()?;
    let b = cfg.batch_size;
    let single = |n: usize, name: &str, to_real: bool| -> Result<Vec<BatchPlan>> {
        if n == 0 {
            return Err(config_err!("{} mode needs a non-empty {name} pool", cfg.mode.name()));
        }
        let order = shuffled(n, &mut epoch_rng(cfg.seed, epoch, 0));
        Ok(order
            .chunks_exact(b)
            .map(|c| {
                if to_real {
                    BatchPlan {
                        syn: Vec::new(),
                        real: c.to_vec(),
                    }
                } else {
                    BatchPlan {
                        syn: c.to_vec(),
                        real: Vec::new(),
                    }
                }
            })
            .collect())
    };
    match cfg.mode {
        TrainMode::SynOnly | TrainMode::Finetune => single(n_syn, "synthetic", false),
        TrainMode::RealOnly => single(n_real, "real", true),
        TrainMode::Joint => {
            if n_syn == 0 || n_real == 0 {
                return Err(config_err!("joint mode needs non-empty synthetic and real pools"));
            }
            let r = cfg.real_per_batch();
            let s = b - r;
            let syn_order = shuffled(n_syn, &mut epoch_rng(cfg.seed, epoch, 0));
            let batches = n_syn / s;
            let mut real_order = Vec::with_capacity(batches * r);
            let mut cycle = 1;
            while real_order.len() < batches * r {
                real_order.extend(shuffled(n_real, &mut epoch_rng(cfg.seed, epoch, cycle)));
                cycle += 1;
            }
            Ok((0..batches)
                .map(|i| BatchPlan {
                    syn: syn_order[i * s..(i + 1) * s].to_vec(),
                    real: real_order[i * r..(i + 1) * r].to_vec(),
                })
                .collect())
        }
    }
}

/// Mean loss terms of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub total: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainData<'a> {
    /// Degree-labeled pool.
    pub syn: Option<&'a Dataset>,
    /// Binary-labeled pool.
    pub real: Option<&'a Dataset>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetParams<f32>,
    pub log: Vec<EpochLog>,
}

fn expect_kind(ds: &Dataset, kind: LabelKind, role: &str) -> Result<()> {
    let got = ds.label_kind()?;
    if got != kind {
        return Err(data_err!("{role} pool must carry {kind:?} labels, found {got:?}"));
    }
    Ok(())
}

fn rows(t: &Tensor<f32>, start: usize, end: usize) -> Result<Tensor<f32>> {
    if start == end {
        Ok(Tensor::zeros(&[0, t.shape()[1]]))
    } else {
        t.slice_outer(start, end)
    }
}

fn gather_labels(ds: Option<&Dataset>, idx: &[usize]) -> Vec<f64> {
    ds.map_or_else(Vec::new, |d| idx.iter().map(|&i| d.samples[i].record.label).collect())
}

/// Trains `params` in place of a copy and returns the result with the
/// per-epoch log. `on_epoch` sees each log entry as soon as it is complete.
pub fn train(
    net: &MfmNet,
    params: NetParams<f32>,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (syn, real) = match cfg.mode {
        TrainMode::SynOnly | TrainMode::Finetune => (data.syn, None),
        TrainMode::RealOnly => (None, data.real),
        TrainMode::Joint => (data.syn, data.real),
    };
    let need_syn = cfg.mode != TrainMode::RealOnly;
    let need_real = matches!(cfg.mode, TrainMode::RealOnly | TrainMode::Joint);
    if need_syn && syn.is_none_or(Dataset::is_empty) {
        return Err(config_err!("{} mode needs a degree-labeled dataset", cfg.mode.name()));
    }
    if need_real && real.is_none_or(Dataset::is_empty) {
        return Err(config_err!(
            "{} mode needs a binary-labeled real dataset",
            cfg.mode.name()
        ));
    }
    if let Some(ds) = syn {
        expect_kind(ds, LabelKind::Degree, "synthetic")?;
    }
    if let Some(ds) = real {
        expect_kind(ds, LabelKind::Binary, "real")?;
    }

    let mut params = params;
    let mut state = AdamState::new(params.tensors());
    let mut log = Vec::with_capacity(cfg.epochs);
    let n_syn = syn.map_or(0, Dataset::len);
    let n_real = real.map_or(0, Dataset::len);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let plan = make_mixed_batches(n_syn, n_real, cfg, epoch)?;
        if plan.is_empty() {
            return Err(config_err!("batch size {} leaves no complete batch", cfg.batch_size));
        }
        let adam = cfg.adam(epoch);
        let mut sums = [0.0f64; 4];
        for (bi, batch) in plan.iter().enumerate() {
            let at = |e: Error| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} batch {bi}: {msg}")),
                other => other,
            };
            let terms = train_step(net, &mut params, &mut state, syn, real, batch, cfg, &adam).map_err(at)?;
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
        }
        let k = plan.len() as f64;
        let entry = EpochLog {
            epoch,
            loss1: sums[0] / k,
            loss2: sums[1] / k,
            loss3: sums[2] / k,
            total: sums[3] / k,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: total {:.4} (loss1 {:.3}, loss2 {:.3}, loss3 {:.4})",
            entry.total,
            entry.loss1,
            entry.loss2,
            entry.loss3
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &MfmNet,
    params: &mut NetParams<f32>,
    state: &mut AdamState<f32>,
    syn: Option<&Dataset>,
    real: Option<&Dataset>,
    batch: &BatchPlan,
    cfg: &TrainConfig,
    adam: &crate::tensor::AdamConfig,
) -> Result<[f64; 4]> {
    let (ns, nr) = (batch.syn.len(), batch.real.len());
    let mut parts = Vec::with_capacity(2);
    if let Some(ds) = syn.filter(|_| ns > 0) {
        parts.push(ds.images(&batch.syn)?);
    }
    if let Some(ds) = real.filter(|_| nr > 0) {
        parts.push(ds.images(&batch.real)?);
    }
    let x = Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())?;
    let out = net.forward(params, &x)?;
    let (o1_syn, o1_real) = (rows(&out.o1, 0, ns)?, rows(&out.o1, ns, ns + nr)?);
    let (o2_syn, o2_real) = (rows(&out.o2, 0, ns)?, rows(&out.o2, ns, ns + nr)?);
    let (labels_syn, labels_real) = (gather_labels(syn, &batch.syn), gather_labels(real, &batch.real));
    let loss = combined_loss(
        BatchOutputs {
            o1_syn: &o1_syn,
            o2_syn: &o2_syn,
            labels_syn: &labels_syn,
            o1_real: &o1_real,
            o2_real: &o2_real,
            labels_real: &labels_real,
        },
        &cfg.weights,
    )?;
    let d_o1 = Tensor::concat_outer(&[&loss.d_o1_syn, &loss.d_o1_real])?;
    let d_o2 = Tensor::concat_outer(&[&loss.d_o2_syn, &loss.d_o2_real])?;
    let grads = net.backward(params, &out.cache, &d_o1, &d_o2)?;
    for (g, name) in grads.iter().zip(params.names()) {
        g.check_finite(&format!("gradient of {name}"))?;
    }
    adam_step(params.tensors_mut(), &grads, state, adam)?;
    Ok([loss.loss1, loss.loss2, loss.loss3, loss.total])
}

/// Deterministic 75/25 split of `n` fine-tuning samples by a hash of the
/// sample index. Exactly `floor(0.75 n)` samples go to training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

const SPLIT_SALT: u64 = 0x5eed_5b17;

pub fn finetune_split(n: usize) -> FinetuneSplit {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (mix64(i as u64 ^ SPLIT_SALT), i));
    let cut = n * 3 / 4;
    let (mut train, mut test) = (order[..cut].to_vec(), order[cut..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    FinetuneSplit { train, test }
}

/// Continues training on the training part of a degree-labeled pseudo-real
/// set with Loss1 alone, optionally pooled with synthetic crops. Returns the
/// outcome and the split, whose `test` part is held out.
pub fn finetune(
    net: &MfmNet,
    params: NetParams<f32>,
    realprime: &Dataset,
    syn: Option<&Dataset>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainOutcome, FinetuneSplit)> {
    if realprime.is_empty() {
        return Err(config_err!("fine-tuning set is empty"));
    }
    if realprime.label_kind()? != LabelKind::Degree {
        return Err(data_err!(
            "fine-tuning needs degree labels; the given set is binary-labeled"
        ));
    }
    let split = finetune_split(realprime.len());
    let mut pool = realprime.subset(&split.train);
    if cfg.finetune_with_syn {
        let syn = syn.ok_or_else(|| config_err!("finetune_with_syn is set but no synthetic set was given"))?;
        expect_kind(syn, LabelKind::Degree, "synthetic")?;
        pool.samples.extend(syn.samples.iter().cloned());
    }
    let cfg = TrainConfig {
        mode: TrainMode::Finetune,
        ..cfg.clone()
    };
    let data = TrainData {
        syn: Some(&pool),
        real: None,
    };
    Ok((train(net, params, data, &cfg, on_epoch)?, split))
}

#[cfg(test)]
mod tests;
