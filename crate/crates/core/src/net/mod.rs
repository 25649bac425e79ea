//! The eye-openness network: a convolutional trunk with Max-Feature-Map
//! activations, a 256-wide MFM feature head (`o1`) and a scalar degree head
//! (`o2`).

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_output_extent, linear_backward, linear_forward, maxpool2_backward,
    maxpool2_forward, mfm_backward, mfm_forward, ConvCache, LinearCache, MfmCache, PoolCache, Real, Tensor,
};

pub use checkpoint::{
    load_any_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

/// Crop geometry consumed by the network: channels, rows, columns.
pub const INPUT_GEOMETRY: [usize; 3] = [1, 48, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Convolution producing `out_channels` maps (before any following MFM halves them).
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// 2x2 max pooling, stride 2.
    Pool,
    Mfm,
    Flatten,
    Linear {
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Width of the `o1` feature (output of the MFM after FC1).
    pub feature_width: usize,
    /// Divide raw `[0, 255]` pixels by 255 before the first layer.
    pub input_scale: bool,
}

fn conv(out_channels: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel,
        stride: 1,
        pad: kernel / 2,
    }
}

impl NetConfig {
    /// Five conv+MFM blocks with three pools, then FC1+MFM (256) and FC2 (1).
    pub fn desk() -> Self {
        Self::five_block([16, 24, 32, 24, 16], 256)
    }

    /// Narrower trunk with the same layer structure and feature width, for
    /// quick CPU experiments.
    pub fn compact() -> Self {
        Self::five_block([6, 8, 12, 8, 8], 256)
    }

    /// Tiny trunk used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            input: [1, 8, 12],
            layers: vec![
                conv(4, 3),
                LayerSpec::Mfm,
                LayerSpec::Pool,
                conv(4, 3),
                LayerSpec::Mfm,
                LayerSpec::Pool,
                LayerSpec::Flatten,
                LayerSpec::Linear { out_features: 8 },
                LayerSpec::Mfm,
                LayerSpec::Linear { out_features: 1 },
            ],
            feature_width: 4,
            input_scale: true,
        }
    }

    /// `widths` are the post-MFM channel counts of the five convolutions.
    pub fn five_block(widths: [usize; 5], feature_width: usize) -> Self {
        let [a, b, c, d, e] = widths;
        Self {
            input: INPUT_GEOMETRY,
            layers: vec![
                conv(2 * a, 5),
                LayerSpec::Mfm,
                LayerSpec::Pool,
                conv(2 * b, 3),
                LayerSpec::Mfm,
                LayerSpec::Pool,
                conv(2 * c, 3),
                LayerSpec::Mfm,
                conv(2 * d, 3),
                LayerSpec::Mfm,
                conv(2 * e, 3),
                LayerSpec::Mfm,
                LayerSpec::Pool,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    out_features: 2 * feature_width,
                },
                LayerSpec::Mfm,
                LayerSpec::Linear { out_features: 1 },
            ],
            feature_width,
            input_scale: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "compact" => Ok(Self::compact()),
            "tiny" => Ok(Self::tiny()),
            other => Err(config_err!(
                "unknown network preset {other:?} (expected desk, compact or tiny)"
            )),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["desk", "compact", "tiny"]
    }

    /// Stable 64-bit FNV-1a hash of the canonical layer description.
    pub fn fingerprint(&self) -> u64 {
        let mut desc = format!(
            "in={}x{}x{};feat={};scale={};",
            self.input[0], self.input[1], self.input[2], self.feature_width, self.input_scale
        );
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => desc.push_str(&format!("conv:{out_channels},{kernel},{stride},{pad};")),
                LayerSpec::Pool => desc.push_str("pool;"),
                LayerSpec::Mfm => desc.push_str("mfm;"),
                LayerSpec::Flatten => desc.push_str("flatten;"),
                LayerSpec::Linear { out_features } => desc.push_str(&format!("linear:{out_features};")),
            }
        }
        crate::util::fnv1a(desc.as_bytes())
    }
}

#[derive(Clone, Debug)]
enum StageKind {
    Conv { weight: usize, stride: usize, pad: usize },
    Pool,
    Mfm,
    Flatten,
    Linear { weight: usize },
}

#[derive(Clone, Debug)]
struct Stage {
    kind: StageKind,
    name: String,
}

/// A validated network layout. Parameters live separately in [`NetParams`].
#[derive(Clone, Debug)]
pub struct MfmNet {
    config: NetConfig,
    stages: Vec<Stage>,
    /// Index of the stage whose output is `o1`.
    feature_stage: usize,
    params: Vec<ParamSpec>,
    fingerprint: u64,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    is_bias: bool,
}

impl MfmNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        let [c0, h0, w0] = config.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(config_err!("input geometry must be positive, got {:?}", config.input));
        }
        // activation shape without the batch axis
        let mut shape = vec![c0, h0, w0];
        let mut stages = Vec::new();
        let mut params = Vec::new();
        let (mut n_conv, mut n_fc, mut n_pool, mut n_mfm) = (0, 0, 0, 0);

        for (li, layer) in config.layers.iter().enumerate() {
            let (kind, name) = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(config_err!("layer {li}: conv needs a spatial input, got {shape:?}"));
                    };
                    let (Some(oh), Some(ow)) = (
                        conv_output_extent(h, kernel, stride, pad),
                        conv_output_extent(w, kernel, stride, pad),
                    ) else {
                        return Err(config_err!(
                            "layer {li}: {kernel}x{kernel} conv does not fit a {h}x{w} activation"
                        ));
                    };
                    if out_channels == 0 {
                        return Err(config_err!("layer {li}: conv with zero output channels"));
                    }
                    n_conv += 1;
                    let name = format!("conv{n_conv}");
                    let weight = params.len();
                    let fan_in = c * kernel * kernel;
                    params.push(ParamSpec {
                        name: format!("{name}.weight"),
                        shape: vec![out_channels, c, kernel, kernel],
                        fan_in,
                        is_bias: false,
                    });
                    params.push(ParamSpec {
                        name: format!("{name}.bias"),
                        shape: vec![out_channels],
                        fan_in,
                        is_bias: true,
                    });
                    shape = vec![out_channels, oh, ow];
                    (StageKind::Conv { weight, stride, pad }, name)
                }
                LayerSpec::Pool => {
                    let [c, h, w] = shape[..] else {
                        return Err(config_err!("layer {li}: pool needs a spatial input, got {shape:?}"));
                    };
                    if h < 2 || w < 2 {
                        return Err(config_err!("layer {li}: pool on a {h}x{w} activation underflows"));
                    }
                    n_pool += 1;
                    shape = vec![c, h / 2, w / 2];
                    (StageKind::Pool, format!("pool{n_pool}"))
                }
                LayerSpec::Mfm => {
                    if shape[0] % 2 != 0 {
                        return Err(config_err!("layer {li}: MFM needs an even width, got {}", shape[0]));
                    }
                    shape[0] /= 2;
                    n_mfm += 1;
                    (StageKind::Mfm, format!("mfm{n_mfm}"))
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    (StageKind::Flatten, "flatten".to_string())
                }
                LayerSpec::Linear { out_features } => {
                    let [f] = shape[..] else {
                        return Err(config_err!("layer {li}: linear needs a flat input, got {shape:?}"));
                    };
                    if out_features == 0 {
                        return Err(config_err!("layer {li}: linear with zero outputs"));
                    }
                    n_fc += 1;
                    let name = format!("fc{n_fc}");
                    let weight = params.len();
                    params.push(ParamSpec {
                        name: format!("{name}.weight"),
                        shape: vec![out_features, f],
                        fan_in: f,
                        is_bias: false,
                    });
                    params.push(ParamSpec {
                        name: format!("{name}.bias"),
                        shape: vec![out_features],
                        fan_in: f,
                        is_bias: true,
                    });
                    shape = vec![out_features];
                    (StageKind::Linear { weight }, name)
                }
            };
            stages.push(Stage { kind, name });
        }

        let n = stages.len();
        if n < 2 || !matches!(config.layers[n - 1], LayerSpec::Linear { out_features: 1 }) {
            return Err(config_err!(
                "the last layer must be a linear layer with exactly one output"
            ));
        }
        if config.layers[n - 2] != LayerSpec::Mfm {
            return Err(config_err!("the degree head must be fed by an MFM feature layer"));
        }
        let feature_stage = n - 2;
        let feature_width = match &stages[n - 1].kind {
            StageKind::Linear { weight } => params[*weight].shape[1],
            _ => unreachable!(),
        };
        if feature_width != config.feature_width {
            return Err(config_err!(
                "feature layer is {feature_width} wide but the config asks for {}",
                config.feature_width
            ));
        }

        let fingerprint = config.fingerprint();
        Ok(Self {
            config,
            stages,
            feature_stage,
            params,
            fingerprint,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.params.iter().map(|p| p.shape.as_slice())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases; a pure
    /// function of `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> NetParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .params
            .iter()
            .map(|p| {
                if p.is_bias {
                    Tensor::zeros(&p.shape)
                } else {
                    let std = (2.0 / p.fan_in as f64).sqrt();
                    Tensor::from_fn(&p.shape, |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::from_f64(z * std)
                    })
                }
            })
            .collect();
        NetParams {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            tensors,
            seed: Some(seed),
            fingerprint: self.fingerprint,
            generation: 0,
        }
    }

    /// Wraps externally supplied tensors, checking names and shapes.
    pub fn params_from_tensors<T: Real>(&self, named: Vec<(String, Tensor<T>)>) -> Result<NetParams<T>> {
        if named.len() != self.params.len() {
            return Err(config_err!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                named.len()
            ));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in self.params.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(config_err!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                ));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(NetParams {
            names,
            tensors,
            seed: None,
            fingerprint: self.fingerprint,
            generation: 0,
        })
    }

    fn check_params<T: Real>(&self, params: &NetParams<T>) -> Result<()> {
        if params.fingerprint != self.fingerprint {
            return Err(config_err!(
                "parameters were built for network {:016x}, this network is {:016x}",
                params.fingerprint,
                self.fingerprint
            ));
        }
        Ok(())
    }

    /// Runs a batch `N x C x H x W` through the network.
    pub fn forward<T: Real>(&self, params: &NetParams<T>, batch: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.check_params(params)?;
        let (n, c, h, w) = batch.dims4()?;
        if [c, h, w] != self.config.input {
            return Err(config_err!(
                "batch geometry {c}x{h}x{w} does not match the network input {:?}",
                self.config.input
            ));
        }
        let mut x = if self.config.input_scale {
            let s = T::from_f64(255.0);
            batch.map(|v| v / s)
        } else {
            batch.clone()
        };
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut o1 = None;
        for (si, stage) in self.stages.iter().enumerate() {
            let step = || -> Result<(Tensor<T>, StageCache<T>)> {
                Ok(match stage.kind {
                    StageKind::Conv { weight, stride, pad } => {
                        let (y, c) =
                            conv2d_forward(&x, &params.tensors[weight], &params.tensors[weight + 1], stride, pad)?;
                        (y, StageCache::Conv(c))
                    }
                    StageKind::Pool => {
                        let (y, c) = maxpool2_forward(&x)?;
                        (y, StageCache::Pool(c))
                    }
                    StageKind::Mfm => {
                        let (y, c) = mfm_forward(&x)?;
                        (y, StageCache::Mfm(c))
                    }
                    StageKind::Flatten => {
                        let shape = x.shape().to_vec();
                        let width = x.len() / n;
                        (x.reshape(&[n, width])?, StageCache::Flatten(shape))
                    }
                    StageKind::Linear { weight } => {
                        let (y, c) = linear_forward(&x, &params.tensors[weight], &params.tensors[weight + 1])?;
                        (y, StageCache::Linear(c))
                    }
                })
            };
            let (y, cache) = step().map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{}: {msg}", stage.name)),
                other => other,
            })?;
            y.check_finite(&stage.name)?;
            caches.push(cache);
            if si == self.feature_stage {
                o1 = Some(y.clone());
            }
            x = y;
        }
        Ok(ForwardOutput {
            o1: o1.expect("feature stage is always visited"),
            o2: x,
            cache: ForwardCache {
                stages: caches,
                fingerprint: self.fingerprint,
                generation: params.generation,
                batch: n,
            },
        })
    }

    /// Gradients of `<d_o1, o1> + <d_o2, o2>` with respect to every parameter,
    /// in parameter order. The two head gradients meet at the feature layer.
    pub fn backward<T: Real>(
        &self,
        params: &NetParams<T>,
        cache: &ForwardCache<T>,
        d_o1: &Tensor<T>,
        d_o2: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        self.check_params(params)?;
        if cache.fingerprint != self.fingerprint || cache.generation != params.generation {
            return Err(Error::Usage(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        let n = cache.batch;
        if d_o2.shape() != [n, 1] || d_o1.shape() != [n, self.config.feature_width] {
            return Err(Error::Usage(format!(
                "head gradients {:?} / {:?} do not match batch {n}",
                d_o1.shape(),
                d_o2.shape()
            )));
        }
        let mut grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let mut g = d_o2.clone();
        for si in (0..self.stages.len()).rev() {
            if si == self.feature_stage {
                g.add_assign(d_o1)?;
            }
            g = match (&self.stages[si].kind, &cache.stages[si]) {
                (StageKind::Conv { weight, .. }, StageCache::Conv(c)) => {
                    let r = conv2d_backward(c, &params.tensors[*weight], &g, si > 0)?;
                    grads[*weight] = r.weight;
                    grads[*weight + 1] = r.bias;
                    match r.input {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (StageKind::Pool, StageCache::Pool(c)) => maxpool2_backward(c, &g)?,
                (StageKind::Mfm, StageCache::Mfm(c)) => mfm_backward(c, &g)?,
                (StageKind::Flatten, StageCache::Flatten(shape)) => g.reshape(shape)?,
                (StageKind::Linear { weight }, StageCache::Linear(c)) => {
                    let r = linear_backward(c, &params.tensors[*weight], &g)?;
                    grads[*weight] = r.weight;
                    grads[*weight + 1] = r.bias;
                    r.input
                }
                _ => return Err(Error::Usage("forward cache does not match the network layout".into())),
            };
        }
        Ok(grads)
    }

    /// Reported degree for one preprocessed `1 x 1 x H x W` crop.
    pub fn infer_degree(&self, params: &NetParams<f32>, crop: &Tensor<f32>) -> Result<DegreeEstimate> {
        if crop.shape().first() != Some(&1) {
            return Err(config_err!("infer_degree takes a single crop, got {:?}", crop.shape()));
        }
        let out = self.forward(params, crop)?;
        Ok(DegreeEstimate::from_raw(out.o2.data()[0] as f64))
    }

    /// Raw `o2` for every sample of a batch, processed in chunks.
    pub fn predict_raw(&self, params: &NetParams<f32>, images: &Tensor<f32>, chunk: usize) -> Result<Vec<f32>> {
        let (n, ..) = images.dims4()?;
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let part = images.slice_outer(start, end)?;
            out.extend_from_slice(self.forward(params, &part)?.o2.data());
            start = end;
        }
        Ok(out)
    }
}

/// Named parameter tensors in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    seed: Option<u64>,
    fingerprint: u64,
    generation: u64,
}

impl<T: Real> NetParams<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Mutable access; any cache from an earlier forward pass becomes stale.
    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            seed: self.seed,
            fingerprint: self.fingerprint,
            generation: 0,
        }
    }

    /// True when every tensor matches bit for bit (seed and bookkeeping ignored).
    pub fn bit_identical(&self, other: &NetParams<T>) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

#[derive(Clone, Debug)]
enum StageCache<T> {
    Conv(ConvCache<T>),
    Pool(PoolCache),
    Mfm(MfmCache),
    Flatten(Vec<usize>),
    Linear(LinearCache<T>),
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    stages: Vec<StageCache<T>>,
    fingerprint: u64,
    generation: u64,
    batch: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T = f32> {
    /// `N x feature_width`.
    pub o1: Tensor<T>,
    /// `N x 1`, unclamped.
    pub o2: Tensor<T>,
    pub cache: ForwardCache<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DegreeEstimate {
    pub raw: f64,
    /// `max(raw, 0)`; values above 100 are kept.
    pub degree: f64,
}

impl DegreeEstimate {
    pub fn from_raw(raw: f64) -> Self {
        Self {
            raw,
            degree: raw.max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EyeState {
    Open,
    Closed,
}

/// Open iff the raw degree is strictly above the openness threshold.
pub fn classify_open(degree_raw: f64, threshold: f64) -> EyeState {
    if degree_raw > threshold {
        EyeState::Open
    } else {
        EyeState::Closed
    }
}
