//! Sampling grids, labeled datasets, blink sequences and their on-disk form
//! (binary PGM crops plus a JSON Lines manifest).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_binary_label, render_eye_crop, DomainStyle, SceneParams, CROP_HEIGHT, CROP_PIXELS, CROP_WIDTH};
use crate::error::{config_err, data_err, Error, Result};
use crate::tensor::Tensor;
use crate::util::derive_seed;

/// Openness states of the synthetic set: 0 to 100 in steps of 10.
pub const OPENNESS_SYN: [f64; 11] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];
/// Pseudo-real states avoid `(0, 30)` so binary labels are unambiguous.
pub const OPENNESS_REAL: [f64; 9] = [0.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];
/// Vertical gaze stations, degrees.
pub const GAZE_VERTICAL: [f64; 11] = [-25.0, -20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0];
pub const HORIZONTAL_STATIONS: usize = 18;
/// Camera pitch and yaw stations, degrees.
pub const CAMERA_STEPS: [f64; 7] = [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0];

/// 18 evenly spaced horizontal gaze stations spanning +-35 degrees.
pub fn gaze_horizontal() -> [f64; HORIZONTAL_STATIONS] {
    std::array::from_fn(|i| -35.0 + 70.0 * i as f64 / (HORIZONTAL_STATIONS - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Synthetic style, exact degree labels.
    Syn,
    /// Pseudo-real style, binary labels only.
    Real,
    /// Pseudo-real style with degree labels (the fine-tuning set).
    Realprime,
}

impl Domain {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "syn" => Ok(Self::Syn),
            "real" => Ok(Self::Real),
            "realprime" => Ok(Self::Realprime),
            other => Err(config_err!(
                "unknown domain {other:?} (expected syn, real or realprime)"
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Syn => "syn",
            Self::Real => "real",
            Self::Realprime => "realprime",
        }
    }

    pub fn style(self) -> DomainStyle {
        match self {
            Self::Syn => DomainStyle::synthetic(),
            Self::Real | Self::Realprime => DomainStyle::pseudo_real(),
        }
    }

    pub fn label_kind(self) -> LabelKind {
        match self {
            Self::Real => LabelKind::Binary,
            Self::Syn | Self::Realprime => LabelKind::Degree,
        }
    }

    pub fn openness_states(self) -> &'static [f64] {
        match self {
            Self::Real => &OPENNESS_REAL,
            Self::Syn | Self::Realprime => &OPENNESS_SYN,
        }
    }

    /// Thirteen synthetic heads; sixteen pseudo-real people.
    pub fn subjects(self) -> Vec<u32> {
        match self {
            Self::Syn => (0..13).collect(),
            Self::Real | Self::Realprime => (100..116).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Degree,
    Binary,
}

/// How openness states are assigned to sample indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cycle through the states by index instead of drawing them.
    pub stratified: bool,
    /// Replaces the domain's default openness states.
    pub openness: Option<Vec<f64>>,
}

/// Scene parameters of sample `index`; depends only on `(domain, grid,
/// dataset_seed, index)`.
pub fn plan_sample(domain: Domain, grid: &GridSpec, dataset_seed: u64, index: u64) -> SceneParams {
    let seed = derive_seed(dataset_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = grid.openness.as_deref().unwrap_or(domain.openness_states());
    let openness = if grid.stratified {
        states[(index % states.len() as u64) as usize]
    } else {
        *states.choose(&mut rng).expect("non-empty state list")
    };
    let horizontal = gaze_horizontal();
    let subjects = domain.subjects();
    SceneParams {
        openness,
        gaze: [
            *GAZE_VERTICAL.choose(&mut rng).unwrap(),
            *horizontal.choose(&mut rng).unwrap(),
        ],
        camera: [
            *CAMERA_STEPS.choose(&mut rng).unwrap(),
            *CAMERA_STEPS.choose(&mut rng).unwrap(),
        ],
        subject_id: *subjects.choose(&mut rng).unwrap(),
        seed,
    }
}

pub fn plan_dataset(domain: Domain, count: usize, grid: &GridSpec, dataset_seed: u64) -> Result<Vec<SceneParams>> {
    if count == 0 {
        return Err(config_err!("sample count must be at least 1"));
    }
    if let Some(states) = &grid.openness {
        if states.is_empty() {
            return Err(config_err!("openness state list is empty"));
        }
        if domain == Domain::Real {
            for &s in states {
                derive_binary_label(s).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
    }
    Ok((0..count as u64)
        .map(|i| plan_sample(domain, grid, dataset_seed, i))
        .collect())
}

/// Relative frequency of each openness bin `{0}, [30,40), ..., [90,100]`
/// among the samples that fall on that support.
pub fn openness_histogram(params: &[SceneParams]) -> [f64; 8] {
    let mut counts = [0usize; 8];
    for p in params {
        let o = p.openness;
        let bin = if o == 0.0 {
            Some(0)
        } else if (30.0..=100.0).contains(&o) {
            Some((((o - 30.0) / 10.0).floor() as usize + 1).min(7))
        } else {
            None
        };
        if let Some(b) = bin {
            counts[b] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image file name relative to the dataset directory.
    pub path: String,
    pub domain: String,
    pub label_kind: LabelKind,
    /// Degree (0-100) or binary 0/1, according to `label_kind`.
    pub label: f64,
    pub subject: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub openness_gt: Option<f64>,
    pub gaze: [f64; 2],
    pub camera: [f64; 2],
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 48x128 gray levels, row-major.
    pub image: Vec<u8>,
    pub record: ManifestRecord,
}

/// An ordered collection of labeled crops.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The common label kind, or a data error if the set is mixed or empty.
    pub fn label_kind(&self) -> Result<LabelKind> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| data_err!("dataset is empty"))?
            .record
            .label_kind;
        if self.samples.iter().any(|s| s.record.label_kind != first) {
            return Err(data_err!("dataset mixes degree and binary labels"));
        }
        Ok(first)
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.record.label).collect()
    }

    /// `N x 1 x 48 x 128` tensor of the selected samples, in `[0, 255]`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * CROP_PIXELS);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| data_err!("sample index {i} out of range ({} samples)", self.len()))?;
            data.extend(s.image.iter().map(|&v| v as f32));
        }
        Tensor::new(vec![indices.len(), 1, CROP_HEIGHT, CROP_WIDTH], data)
    }

    pub fn all_images(&self) -> Result<Tensor<f32>> {
        self.images(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn file_name(index: usize) -> String {
    format!("{index:06}.pgm")
}

fn record_for(domain: Domain, p: &SceneParams, index: usize) -> Result<ManifestRecord> {
    let (label, openness_gt) = match domain.label_kind() {
        LabelKind::Degree => (p.openness, Some(p.openness)),
        LabelKind::Binary => (derive_binary_label(p.openness)? as f64, None),
    };
    Ok(ManifestRecord {
        path: file_name(index),
        domain: domain.name().to_string(),
        label_kind: domain.label_kind(),
        label,
        subject: p.subject_id,
        openness_gt,
        gaze: p.gaze,
        camera: p.camera,
        seed: p.seed,
        frame_index: None,
    })
}

/// Renders `count` labeled crops of `domain`.
pub fn generate_dataset(domain: Domain, count: usize, grid: &GridSpec, dataset_seed: u64) -> Result<Dataset> {
    let style = domain.style();
    let plan = plan_dataset(domain, count, grid, dataset_seed)?;
    let samples = plan
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let out = render_eye_crop(p, &style)?;
            Ok(Sample {
                image: out.image,
                record: record_for(domain, p, i)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlinkPattern {
    CloseOpen,
    CloseOpenCloseOpen,
}

impl BlinkPattern {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "close-open" => Ok(Self::CloseOpen),
            "close-open-close-open" => Ok(Self::CloseOpenCloseOpen),
            other => Err(config_err!(
                "unknown blink pattern {other:?} (expected close-open or close-open-close-open)"
            )),
        }
    }

    fn extrema(self) -> &'static [f64] {
        match self {
            Self::CloseOpen => &[100.0, 0.0, 100.0],
            Self::CloseOpenCloseOpen => &[100.0, 0.0, 100.0, 0.0, 100.0],
        }
    }

    /// Smallest frame count that gives every ramp an interior frame.
    pub fn min_frames(self) -> usize {
        2 * (self.extrema().len() - 1) + 1
    }
}

/// Piecewise-linear openness through the pattern's extrema. Extremum `k` of
/// `K + 1` sits at frame `round(k * (frames - 1) / K)`, so minima hit 0 exactly.
pub fn blink_degrees(pattern: BlinkPattern, frames: usize) -> Result<Vec<f64>> {
    if frames < pattern.min_frames() {
        return Err(config_err!(
            "a {pattern:?} sequence needs at least {} frames, got {frames}",
            pattern.min_frames()
        ));
    }
    let ext = pattern.extrema();
    let segments = ext.len() - 1;
    let anchors: Vec<usize> = (0..=segments)
        .map(|k| ((k * (frames - 1)) as f64 / segments as f64).round() as usize)
        .collect();
    Ok((0..frames)
        .map(|f| {
            let k = (0..segments).find(|&k| f <= anchors[k + 1]).unwrap_or(segments - 1);
            let (f0, f1) = (anchors[k], anchors[k + 1]);
            let t = (f - f0) as f64 / (f1 - f0) as f64;
            ext[k] + (ext[k + 1] - ext[k]) * t
        })
        .collect())
}

/// Fixed pose and appearance for a blink recording.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlinkSetup {
    pub subject_id: u32,
    pub gaze: [f64; 2],
    pub camera: [f64; 2],
    pub seed: u64,
}

/// Renders a slow blink; every frame shares subject, pose and seed.
pub fn render_blink_sequence(
    setup: &BlinkSetup,
    pattern: BlinkPattern,
    frames: usize,
    style: &DomainStyle,
    style_name: &str,
) -> Result<Dataset> {
    let degrees = blink_degrees(pattern, frames)?;
    let samples = degrees
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let p = SceneParams {
                openness: d,
                gaze: setup.gaze,
                camera: setup.camera,
                subject_id: setup.subject_id,
                seed: setup.seed,
            };
            let out = render_eye_crop(&p, style)?;
            Ok(Sample {
                image: out.image,
                record: ManifestRecord {
                    path: file_name(i),
                    domain: style_name.to_string(),
                    label_kind: LabelKind::Degree,
                    label: d,
                    subject: setup.subject_id,
                    openness_gt: Some(d),
                    gaze: setup.gaze,
                    camera: setup.camera,
                    seed: setup.seed,
                    frame_index: Some(i),
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Encodes an 8-bit gray image as binary PGM (P5).
pub fn encode_pgm(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| data_err!("PGM encoding failed: {e}"))?;
    Ok(buf)
}

/// Writes each crop as PGM and the manifest as JSON Lines into `dir`, which
/// is created if missing.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_NAME);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut manifest = BufWriter::new(file);
    for s in &dataset.samples {
        let path = dir.join(&s.record.path);
        fs::write(&path, encode_pgm(&s.image, CROP_WIDTH, CROP_HEIGHT)?).map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(&s.record).map_err(|e| data_err!("manifest encoding: {e}"))?;
        writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))
}

/// Reads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| data_err!("{} line {}: {e}", manifest_path.display(), n + 1))?;
        let path = dir.join(&record.path);
        let img = crate::preprocess::read_gray(&path)?;
        if img.width != CROP_WIDTH || img.height != CROP_HEIGHT {
            return Err(data_err!(
                "{} is {}x{}, expected {CROP_WIDTH}x{CROP_HEIGHT}",
                path.display(),
                img.width,
                img.height
            ));
        }
        samples.push(Sample {
            image: img.data,
            record,
        });
    }
    if samples.is_empty() {
        return Err(data_err!("{} lists no samples", manifest_path.display()));
    }
    Ok(Dataset { samples })
}
