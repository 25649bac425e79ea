use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{combined_loss, loss1_mse, loss2_binary, loss3_distribution, BatchOutputs, LossWeights};
use crate::net::{MfmNet, NetConfig};
use crate::tensor::{
    conv2d_backward, conv2d_forward, finite_diff_grad, linear_backward, linear_forward, maxpool2_backward,
    maxpool2_forward, mfm_backward, mfm_forward, ConvCache, ConvGrads, Tensor,
};
use crate::util::derive_seed;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: usize = 10;
/// Minimum distance from any kink of a sampled point.
const MARGIN: f64 = 1e-2;

pub type ConvBackwardFn = fn(&ConvCache<f64>, &Tensor<f64>, &Tensor<f64>, bool) -> Result<ConvGrads<f64>>;

/// Backward kernels under test; replaceable so the harness can be checked
/// against a deliberately broken implementation.
#[derive(Clone, Copy)]
pub struct Kernels {
    pub conv_backward: ConvBackwardFn,
}

impl Default for Kernels {
    fn default() -> Self {
        Self {
            conv_backward: conv2d_backward::<f64>,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub components: Vec<ComponentCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&str> {
        self.components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest coordinatewise relative error between `analytic` and central
/// differences of `f` with respect to each input tensor.
fn compare(inputs: &[Tensor<f64>], analytic: &[Tensor<f64>], f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, (x, a)) in inputs.iter().zip(analytic).enumerate() {
        if x.shape() != a.shape() {
            return Err(Error::Oracle(format!(
                "analytic gradient {:?} does not match input {:?}",
                a.shape(),
                x.shape()
            )));
        }
        if x.is_empty() {
            continue;
        }
        let numeric = finite_diff_grad(
            |probe| {
                let mut all = inputs.to_vec();
                all[i] = probe.clone();
                f(&all)
            },
            x,
            STEP,
        )?;
        for (&av, &nv) in a.data().iter().zip(numeric.data()) {
            worst = worst.max(rel_err(av, nv));
        }
    }
    Ok(worst)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Resamples until `ok` accepts the draw.
fn draw<T>(rng: &mut ChaCha8Rng, mut gen: impl FnMut(&mut ChaCha8Rng) -> T, ok: impl Fn(&T) -> bool) -> Result<T> {
    for _ in 0..10_000 {
        let v = gen(rng);
        if ok(&v) {
            return Ok(v);
        }
    }
    Err(Error::Oracle("could not draw an off-kink point".into()))
}

type PointFn<'a> = dyn Fn(&mut ChaCha8Rng) -> Result<f64> + 'a;

fn component(name: &str, seed: u64, index: u64, point: &PointFn<'_>) -> ComponentCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        match point(&mut rng) {
            Ok(e) => worst = worst.max(e),
            Err(e) => {
                return ComponentCheck {
                    name: name.to_string(),
                    points: POINTS,
                    max_rel_err: f64::INFINITY,
                    passed: false,
                    error: Some(e.to_string()),
                }
            }
        }
    }
    ComponentCheck {
        name: name.to_string(),
        points: POINTS,
        max_rel_err: worst,
        passed: worst <= TOLERANCE,
        error: None,
    }
}

fn conv_point(rng: &mut ChaCha8Rng, k: &Kernels) -> Result<f64> {
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let x = randn(rng, &[2, 2, 6, 5], 1.0);
    let w = randn(rng, &[3, 2, 3, 3], 0.5);
    let b = randn(rng, &[3], 0.5);
    let (y, cache) = conv2d_forward(&x, &w, &b, stride, pad)?;
    let r = randn(rng, y.shape(), 1.0);
    let g = (k.conv_backward)(&cache, &w, &r, true)?;
    let dx = g
        .input
        .ok_or_else(|| Error::Oracle("conv2d returned no input gradient".into()))?;
    compare(&[x, w, b], &[dx, g.weight, g.bias], &|t| {
        Ok(dot(&conv2d_forward(&t[0], &t[1], &t[2], stride, pad)?.0, &r))
    })
}

fn pool_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = draw(
        rng,
        |r| randn(r, &[2, 2, 4, 6], 1.0),
        |x| {
            // Every 2x2 window needs a clear winner.
            let d = x.data();
            d.chunks_exact(6).collect::<Vec<_>>().chunks_exact(2).all(|rows| {
                (0..3).all(|j| {
                    let mut v = [rows[0][2 * j], rows[0][2 * j + 1], rows[1][2 * j], rows[1][2 * j + 1]];
                    v.sort_by(|a, b| b.total_cmp(a));
                    v[0] - v[1] > MARGIN
                })
            })
        },
    )?;
    let (y, cache) = maxpool2_forward(&x)?;
    let r = randn(rng, y.shape(), 1.0);
    let dx = maxpool2_backward(&cache, &r)?;
    compare(&[x], &[dx], &|t| Ok(dot(&maxpool2_forward(&t[0])?.0, &r)))
}

fn mfm_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = draw(
        rng,
        |r| randn(r, &[2, 6, 3, 3], 1.0),
        |x| {
            x.data()
                .chunks_exact(6 * 9)
                .all(|s| (0..27).all(|i| (s[i] - s[i + 27]).abs() > MARGIN))
        },
    )?;
    let (y, cache) = mfm_forward(&x)?;
    let r = randn(rng, y.shape(), 1.0);
    let dx = mfm_backward(&cache, &r)?;
    compare(&[x], &[dx], &|t| Ok(dot(&mfm_forward(&t[0])?.0, &r)))
}

fn linear_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = randn(rng, &[3, 7], 1.0);
    let w = randn(rng, &[4, 7], 0.5);
    let b = randn(rng, &[4], 0.5);
    let (y, cache) = linear_forward(&x, &w, &b)?;
    let r = randn(rng, y.shape(), 1.0);
    let g = linear_backward(&cache, &w, &r)?;
    compare(&[x, w, b], &[g.input, g.weight, g.bias], &|t| {
        Ok(dot(&linear_forward(&t[0], &t[1], &t[2])?.0, &r))
    })
}

fn degrees(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 1], |_| rng.random_range(-20.0..120.0))
}

fn loss1_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..6);
    let o = degrees(rng, n);
    let labels: Vec<f64> = (0..n).map(|_| (rng.random_range(0..=10) * 10) as f64).collect();
    let g = loss1_mse(&o, &labels)?.grad;
    compare(&[o], &[g], &|t| Ok(loss1_mse(&t[0], &labels)?.value))
}

fn binary_batch(rng: &mut ChaCha8Rng, ot: f64) -> Result<(Tensor<f64>, Vec<f64>)> {
    let n = rng.random_range(1..6);
    let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..=1) as f64).collect();
    let o = draw(
        rng,
        |r| degrees(r, n),
        |o| o.data().iter().all(|v| (v - ot).abs() > MARGIN),
    )?;
    Ok((o, labels))
}

fn loss2_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let ot = 15.0;
    let (o, labels) = binary_batch(rng, ot)?;
    let g = loss2_binary(&o, &labels, ot)?.grad;
    compare(&[o], &[g], &|t| Ok(loss2_binary(&t[0], &labels, ot)?.value))
}

fn stats(t: &Tensor<f64>) -> (f64, f64) {
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    (mean, t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

fn feature_pair(rng: &mut ChaCha8Rng, ns: usize, nr: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    draw(
        rng,
        |r| {
            let shift = r.random_range(-1.0..1.0);
            let a = randn(r, &[ns, 5], 1.0);
            let b = randn(r, &[nr, 5], 1.5).map(|v| v + shift);
            (a, b)
        },
        |(a, b)| {
            let ((ma, va), (mb, vb)) = (stats(a), stats(b));
            (ma - mb).abs() > MARGIN && (va - vb).abs() > MARGIN
        },
    )
}

fn loss3_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (ns, nr) = (rng.random_range(1..5), rng.random_range(1..5));
    let (a, b) = feature_pair(rng, ns, nr)?;
    let t = loss3_distribution(&a, &b)?;
    compare(&[a, b], &[t.grad_syn, t.grad_real], &|t| {
        Ok(loss3_distribution(&t[0], &t[1])?.value)
    })
}

fn combined_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = LossWeights::default();
    let ns = rng.random_range(1..5);
    let (o2r, labels_real) = binary_batch(rng, w.ot)?;
    let o2s = degrees(rng, ns);
    let labels_syn: Vec<f64> = (0..ns).map(|_| (rng.random_range(0..=10) * 10) as f64).collect();
    let (o1s, o1r) = feature_pair(rng, ns, o2r.len())?;
    let eval = |t: &[Tensor<f64>]| {
        combined_loss(
            BatchOutputs {
                o1_syn: &t[0],
                o2_syn: &t[1],
                labels_syn: &labels_syn,
                o1_real: &t[2],
                o2_real: &t[3],
                labels_real: &labels_real,
            },
            &w,
        )
    };
    let inputs = [o1s, o2s, o1r, o2r];
    let c = eval(&inputs)?;
    compare(&inputs, &[c.d_o1_syn, c.d_o2_syn, c.d_o1_real, c.d_o2_real], &|t| {
        Ok(eval(t)?.total)
    })
}

/// End-to-end check through the tiny network. Points whose numeric gradient
/// changes with the step (an activation crossing a kink) are redrawn.
fn network_point(rng: &mut ChaCha8Rng, net: &MfmNet) -> Result<f64> {
    let [c, h, w] = net.config().input;
    for _ in 0..100 {
        let params = net.init_params::<f64>(rng.random());
        let x = Tensor::from_fn(&[2, c, h, w], |_| rng.random_range(0.0..255.0));
        let out = net.forward(&params, &x)?;
        let r1 = randn(rng, out.o1.shape(), 1.0);
        let r2 = randn(rng, out.o2.shape(), 1.0);
        let grads = net.backward(&params, &out.cache, &r1, &r2)?;
        let names: Vec<String> = params.names().to_vec();
        let objective = |tensors: &[Tensor<f64>]| -> Result<f64> {
            let p = net.params_from_tensors(names.iter().cloned().zip(tensors.iter().cloned()).collect())?;
            let o = net.forward(&p, &x)?;
            Ok(dot(&o.o1, &r1) + dot(&o.o2, &r2))
        };
        let tensors = params.tensors().to_vec();
        let smooth = tensors.iter().enumerate().all(|(i, t)| {
            let f = |probe: &Tensor<f64>| {
                let mut all = tensors.clone();
                all[i] = probe.clone();
                objective(&all)
            };
            match (finite_diff_grad(f, t, STEP), finite_diff_grad(f, t, STEP / 2.0)) {
                (Ok(a), Ok(b)) => a
                    .data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| (x - y).abs() <= 1e-7 * x.abs().max(1.0)),
                _ => false,
            }
        });
        if smooth {
            return compare(&tensors, &grads, &objective);
        }
    }
    Err(Error::Oracle("could not draw an off-kink network point".into()))
}

pub fn gradcheck_suite(seed: u64) -> GradcheckReport {
    gradcheck_suite_with(seed, &Kernels::default())
}

/// Checks every kernel, every loss and the tiny network against central
/// differences at [`POINTS`] random off-kink points each.
pub fn gradcheck_suite_with(seed: u64, kernels: &Kernels) -> GradcheckReport {
    let net = MfmNet::new(NetConfig::tiny()).expect("tiny preset is valid");
    let components = vec![
        component("conv2d", seed, 0, &|r| conv_point(r, kernels)),
        component("maxpool2", seed, 1, &pool_point),
        component("mfm", seed, 2, &mfm_point),
        component("linear", seed, 3, &linear_point),
        component("loss1", seed, 4, &loss1_point),
        component("loss2", seed, 5, &loss2_point),
        component("loss3", seed, 6, &loss3_point),
        component("combined", seed, 7, &combined_point),
        component("network", seed, 8, &|r| network_point(r, &net)),
    ];
    let passed = components.iter().all(|c| c.passed);
    GradcheckReport {
        seed,
        step: STEP,
        tolerance: TOLERANCE,
        components,
        passed,
    }
}
