//! Procedural two-eye crops in two appearance styles.
//!
//! Geometry (eyelids, iris, camera) is a pure function of [`SceneParams`]
//! minus the seed; the seed only drives appearance jitter, noise, glare and
//! glasses. The lid aperture height is linear in openness, so the rendered
//! aperture area is an exact monotone oracle for the label.

mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};
use crate::util::derive_seed;

pub use dataset::*;

pub const CROP_WIDTH: usize = 128;
pub const CROP_HEIGHT: usize = 48;
pub const CROP_PIXELS: usize = CROP_WIDTH * CROP_HEIGHT;

const SUPERSAMPLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Degree of openness, 0 closed to 100 fully open.
    pub openness: f64,
    /// `[vertical, horizontal]` in degrees.
    pub gaze: [f64; 2],
    /// `[pitch, yaw]` in degrees.
    pub camera: [f64; 2],
    pub subject_id: u32,
    pub seed: u64,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("openness", self.openness, 0.0, 100.0),
            ("vertical gaze", self.gaze[0], -25.0, 25.0),
            ("horizontal gaze", self.gaze[1], -35.0, 35.0),
            ("camera pitch", self.camera[0], -30.0, 30.0),
            ("camera yaw", self.camera[1], -30.0, 30.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(v >= lo && v <= hi) {
                return Err(data_err!("{name} {v} outside [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

/// Appearance of one image domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Range the skin gray level is drawn from.
    pub skin_range: [f64; 2],
    /// Sclera brightness as a multiple of skin.
    pub sclera_gain: f64,
    pub iris_range: [f64; 2],
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels; 0 disables.
    pub blur_sigma: f64,
    pub gamma: f64,
    pub glare_prob: f64,
    pub glasses_prob: f64,
}

impl DomainStyle {
    /// Clean rendering with bright sclera and dark irises.
    pub fn synthetic() -> Self {
        Self {
            skin_range: [105.0, 165.0],
            sclera_gain: 1.45,
            iris_range: [45.0, 105.0],
            noise_sigma: 1.5,
            blur_sigma: 0.0,
            gamma: 1.0,
            glare_prob: 0.0,
            glasses_prob: 0.0,
        }
    }

    /// Sensor-like rendering: bright skin, low sclera contrast, light irises,
    /// blur, noise, glare and frequent glasses.
    pub fn pseudo_real() -> Self {
        Self {
            skin_range: [140.0, 205.0],
            sclera_gain: 1.08,
            iris_range: [110.0, 150.0],
            noise_sigma: 7.0,
            blur_sigma: 1.1,
            gamma: 0.8,
            glare_prob: 0.3,
            glasses_prob: 0.4,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "syn" => Ok(Self::synthetic()),
            "real" => Ok(Self::pseudo_real()),
            other => Err(config_err!("unknown style {other:?} (expected syn or real)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("glare_prob", self.glare_prob), ("glasses_prob", self.glasses_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0 && self.gamma > 0.0) {
            return Err(config_err!("noise, blur must be non-negative and gamma positive"));
        }
        if !(self.skin_range[0] <= self.skin_range[1] && self.iris_range[0] <= self.iris_range[1]) {
            return Err(config_err!("intensity ranges must be ordered"));
        }
        Ok(())
    }
}

/// Per-subject face geometry and tones, a pure function of the id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Subject {
    pub id: u32,
    /// Eye half-width in pixels.
    pub half_width: f64,
    /// Upper-lid lift at full openness.
    pub max_half_height: f64,
    pub iris_radius: f64,
    /// Horizontal distance of each eye center from the crop center.
    pub eye_offset: f64,
    pub eye_row: f64,
    pub brow_gap: f64,
    pub tone: f64,
    pub iris_tone: f64,
    /// Aperture pixels per eye at openness 100, straight gaze and camera.
    pub max_aperture_area: [u32; 2],
}

const LOWER_LID_RATIO: f64 = 0.45;
const SUBJECT_STREAM: u64 = 0x005e_ed0f_face;

impl Subject {
    pub fn new(id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SUBJECT_STREAM, id as u64));
        let half_width = rng.random_range(15.0..19.0);
        let mut s = Self {
            id,
            half_width,
            max_half_height: half_width * rng.random_range(0.40..0.50),
            iris_radius: half_width * rng.random_range(0.36..0.42),
            eye_offset: rng.random_range(26.0..30.0),
            eye_row: rng.random_range(24.0..27.0),
            brow_gap: rng.random_range(4.0..7.0),
            tone: rng.random_range(0.0..1.0),
            iris_tone: rng.random_range(0.0..1.0),
            max_aperture_area: [0, 0],
        };
        let reference = Geometry::new(&s, 100.0, [0.0, 0.0], [0.0, 0.0]);
        s.max_aperture_area = reference.aperture_area();
        s
    }
}

/// Canonical-to-image affine for a camera pose, about the crop center.
#[derive(Clone, Copy, Debug)]
struct Camera {
    sx: f64,
    sy: f64,
    shear: f64,
    tx: f64,
    ty: f64,
}

const CENTER_X: f64 = CROP_WIDTH as f64 / 2.0;
const CENTER_Y: f64 = CROP_HEIGHT as f64 / 2.0;

impl Camera {
    fn new([pitch, yaw]: [f64; 2]) -> Self {
        let (p, y) = (pitch.to_radians(), yaw.to_radians());
        Self {
            sx: y.cos().sqrt(),
            sy: p.cos().sqrt(),
            shear: 0.25 * y.sin() * p.sin(),
            tx: 5.0 * y.sin(),
            ty: -4.0 * p.sin(),
        }
    }

    /// Canonical point to image point.
    fn project(&self, x: f64, y: f64) -> (f64, f64) {
        (
            CENTER_X + self.sx * (x - CENTER_X) + self.shear * (y - CENTER_Y) + self.tx,
            CENTER_Y + self.sy * (y - CENTER_Y) + self.ty,
        )
    }

    /// Image point to canonical point.
    fn unproject(&self, x: f64, y: f64) -> (f64, f64) {
        let cy = CENTER_Y + (y - CENTER_Y - self.ty) / self.sy;
        let cx = CENTER_X + (x - CENTER_X - self.tx - self.shear * (cy - CENTER_Y)) / self.sx;
        (cx, cy)
    }
}

#[derive(Clone, Copy, Debug)]
struct Eye {
    cx: f64,
    cy: f64,
    /// Perspective scale of this eye.
    k: f64,
    a: f64,
    b: f64,
    h_up: f64,
    h_lo: f64,
    iris: (f64, f64),
    iris_r: f64,
    brow_gap: f64,
}

impl Eye {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.cx) / self.k, (y - self.cy) / self.k)
    }

    /// Upper and lower lid offsets at local `dx`, if within the eye's width.
    fn lids(&self, dx: f64) -> Option<(f64, f64)> {
        let u = dx / self.a;
        (u.abs() < 1.0).then(|| {
            let w = 1.0 - u * u;
            (-self.h_up * w, self.h_lo * w)
        })
    }

    fn in_aperture(&self, dx: f64, dy: f64) -> bool {
        matches!(self.lids(dx), Some((top, bot)) if dy > top && dy < bot)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    eyes: [Eye; 2],
    camera: Camera,
}

impl Geometry {
    fn new(s: &Subject, openness: f64, gaze: [f64; 2], camera: [f64; 2]) -> Self {
        let t = openness / 100.0;
        let h_up = s.max_half_height * t;
        let yaw = camera[1].to_radians();
        let (gv, gh) = (gaze[0].to_radians(), gaze[1].to_radians());
        let iris = (0.45 * s.half_width * gh.sin(), -0.5 * s.max_half_height * gv.sin());
        let eye = |side: f64| Eye {
            cx: CENTER_X + side * s.eye_offset,
            cy: s.eye_row,
            k: 1.0 - side * 0.12 * yaw.sin(),
            a: s.half_width,
            b: s.max_half_height,
            h_up,
            h_lo: LOWER_LID_RATIO * h_up,
            iris,
            iris_r: s.iris_radius,
            brow_gap: s.brow_gap,
        };
        Self {
            eyes: [eye(-1.0), eye(1.0)],
            camera: Camera::new(camera),
        }
    }

    /// Output pixels whose center falls inside each eye's lid aperture. The
    /// pixel holding the eye center always counts once the lids part, so any
    /// positive openness yields a positive area.
    fn aperture_area(&self) -> [u32; 2] {
        let mut area = [0u32; 2];
        for (e, eye) in self.eyes.iter().enumerate() {
            if eye.h_up <= 0.0 {
                continue;
            }
            let (ex, ey) = self.camera.project(eye.cx, eye.cy);
            let center_pixel = (ex.floor() as isize, ey.floor() as isize);
            for row in 0..CROP_HEIGHT {
                for col in 0..CROP_WIDTH {
                    let (x, y) = self.camera.unproject(col as f64 + 0.5, row as f64 + 0.5);
                    let (dx, dy) = eye.local(x, y);
                    if eye.in_aperture(dx, dy) || (col as isize, row as isize) == center_pixel {
                        area[e] += 1;
                    }
                }
            }
        }
        area
    }
}

#[derive(Clone, Copy, Debug)]
struct Palette {
    skin: f64,
    sclera: f64,
    iris: f64,
    pupil: f64,
    brow: f64,
}

fn ramp(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Superellipse glasses rims around both eyes.
#[derive(Clone, Copy, Debug)]
struct Glasses {
    rx: f64,
    ry: f64,
    dy: f64,
}

fn shade(g: &Geometry, pal: &Palette, glasses: Option<&Glasses>, x: f64, y: f64) -> f64 {
    let mut v = pal.skin * (1.0 - 0.10 * ((y - CENTER_Y) / CENTER_Y).powi(2));
    for eye in &g.eyes {
        let (dx, dy) = eye.local(x, y);
        let (a, b) = (eye.a, eye.b);

        let s = (dx / (1.35 * a)).powi(2) + ((dy + 0.2 * b) / (1.7 * b)).powi(2);
        if s < 6.0 {
            v *= 1.0 - 0.12 * (-s).exp();
        }

        let ub = dx / (1.15 * a);
        if ub.abs() < 1.0 {
            let arc = -(b + eye.brow_gap + 3.0 * (1.0 - ub * ub));
            let thick = 2.2 * (1.0 - 0.6 * ub * ub);
            v *= 1.0 - pal.brow * ramp(thick + 0.5 - (dy - arc).abs());
        }

        if let Some((top, bot)) = eye.lids(dx) {
            let u = dx / a;
            let crease = -(b + 1.5) * (1.0 - u * u).sqrt();
            v *= 1.0 - 0.15 * ramp(0.8 - (dy - crease).abs());
            if dy > top && dy < bot {
                let mut e = pal.sclera * (1.0 - 0.3 * (-(dy - top) / 1.8).exp()) * (1.0 - 0.2 * u.powi(4));
                let (ix, iy) = (dx - eye.iris.0, dy - eye.iris.1);
                let rr = (ix * ix + iy * iy).sqrt() / eye.iris_r;
                if rr < 1.0 {
                    e = if rr < 0.42 {
                        pal.pupil
                    } else {
                        pal.iris * (1.0 - 0.3 * rr.powi(4))
                    };
                    e *= 1.0 - 0.25 * (-(dy - top) / 1.8).exp();
                }
                v = e;
            } else if dy <= top && dy > top - 1.6 {
                v *= 1.0 - 0.75 * (1.0 + (dy - top) / 1.6);
            } else if dy >= bot && dy < bot + 0.8 {
                v *= 1.0 - 0.3 * (1.0 - (dy - bot) / 0.8);
            }
        }

        if let Some(gl) = glasses {
            let (gx, gy) = (dx / gl.rx, (dy - gl.dy) / gl.ry);
            let f = gx.powi(4) + gy.powi(4);
            let d = (f.powf(0.25) - 1.0).abs() * gl.ry;
            if f < 1.0 {
                v = v * 0.9 + 10.0;
            }
            v *= 1.0 - 0.7 * ramp(1.2 - d);
        }
    }
    if let Some(gl) = glasses {
        let [l, r] = &g.eyes;
        let inner_l = l.cx + gl.rx * l.k;
        let inner_r = r.cx - gl.rx * r.k;
        let bridge = l.cy + gl.dy - 0.45 * gl.ry;
        if x > inner_l - 1.0 && x < inner_r + 1.0 {
            v *= 1.0 - 0.6 * ramp(1.0 - (y - bridge).abs());
        }
    }
    v
}

fn gaussian_blur(img: &mut [f64], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (CROP_WIDTH as isize, CROP_HEIGHT as isize);
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = (x + k as isize - radius).clamp(0, w - 1);
                acc += kv * img[(y * w + xx) as usize];
            }
            tmp[(y * w + x) as usize] = acc / norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = (y + k as isize - radius).clamp(0, h - 1);
                acc += kv * tmp[(yy * w + x) as usize];
            }
            img[(y * w + x) as usize] = acc / norm;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Row-major 48x128 gray levels.
    pub image: Vec<u8>,
    /// Open aperture pixels, `[left, right]` eye.
    pub aperture_area: [u32; 2],
    pub degree: f64,
    pub params: SceneParams,
}

// Independent random streams derived from the sample seed.
const STREAM_PALETTE: u64 = 1;
const STREAM_GLASSES: u64 = 2;
const STREAM_GLARE: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, id))
}

pub fn render_eye_crop(p: &SceneParams, style: &DomainStyle) -> Result<RenderOutput> {
    p.validate()?;
    style.validate()?;
    let subject = Subject::new(p.subject_id);
    let geom = Geometry::new(&subject, p.openness, p.gaze, p.camera);

    let mut rng = stream(p.seed, STREAM_PALETTE);
    let lerp = |r: [f64; 2], t: f64| r[0] + (r[1] - r[0]) * t.clamp(0.0, 1.0);
    let skin = lerp(style.skin_range, subject.tone + rng.random_range(-0.1..0.1));
    let pal = Palette {
        skin,
        sclera: (skin * style.sclera_gain).min(250.0),
        iris: lerp(style.iris_range, subject.iris_tone + rng.random_range(-0.1..0.1)),
        pupil: rng.random_range(15.0..35.0),
        brow: rng.random_range(0.35..0.6),
    };

    let mut rng = stream(p.seed, STREAM_GLASSES);
    let glasses = (rng.random::<f64>() < style.glasses_prob).then(|| Glasses {
        rx: 1.5 * subject.half_width * rng.random_range(0.95..1.1),
        ry: 1.35 * subject.max_half_height + rng.random_range(4.0..6.0),
        dy: rng.random_range(-2.0..0.0),
    });

    let mut img = vec![0.0f64; CROP_PIXELS];
    let step = 1.0 / SUPERSAMPLE as f64;
    for row in 0..CROP_HEIGHT {
        for col in 0..CROP_WIDTH {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) * step;
                    let y = row as f64 + (sy as f64 + 0.5) * step;
                    let (cx, cy) = geom.camera.unproject(x, y);
                    acc += shade(&geom, &pal, glasses.as_ref(), cx, cy);
                }
            }
            img[row * CROP_WIDTH + col] = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }

    let mut rng = stream(p.seed, STREAM_GLARE);
    if rng.random::<f64>() < style.glare_prob {
        let eye = &geom.eyes[rng.random_range(0..2)];
        let gx = eye.cx + rng.random_range(-1.2..1.2) * eye.a;
        let gy = eye.cy + rng.random_range(-1.0..0.6) * eye.b;
        let r = rng.random_range(2.5..6.0);
        let amp = rng.random_range(90.0..160.0);
        for row in 0..CROP_HEIGHT {
            for col in 0..CROP_WIDTH {
                let d2 = (col as f64 + 0.5 - gx).powi(2) + (row as f64 + 0.5 - gy).powi(2);
                img[row * CROP_WIDTH + col] += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }

    if style.gamma != 1.0 {
        for v in &mut img {
            *v = 255.0 * (v.clamp(0.0, 255.0) / 255.0).powf(style.gamma);
        }
    }
    if style.blur_sigma > 0.0 {
        gaussian_blur(&mut img, style.blur_sigma);
    }
    if style.noise_sigma > 0.0 {
        let mut rng = stream(p.seed, STREAM_NOISE);
        let normal = Normal::new(0.0, style.noise_sigma).map_err(|e| config_err!("noise: {e}"))?;
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }

    Ok(RenderOutput {
        image: img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        aperture_area: geom.aperture_area(),
        degree: p.openness,
        params: *p,
    })
}

/// Open (1) iff the degree is positive. Pseudo-real degrees in `(0, 30)` are
/// refused so the weak label never sits near the openness threshold.
pub fn derive_binary_label(degree: f64) -> Result<u8> {
    if degree == 0.0 {
        Ok(0)
    } else if (30.0..=100.0).contains(&degree) {
        Ok(1)
    } else {
        Err(data_err!(
            "generation policy: degree {degree} is not in {{0}} or [30, 100] for binary labeling"
        ))
    }
}
