//! Input pipeline for externally supplied face images: grayscale conversion,
//! two-point similarity alignment onto a 144x144 canvas, the fixed 48x128
//! eye-region crop, and pixel-range enforcement.

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error, Result};
use crate::tensor::Tensor;

pub const FACE_SIZE: usize = 144;
/// Canonical outer eye corners on the aligned face, `(x, y)`.
pub const CANONICAL_LEFT: [f64; 2] = [36.0, 56.0];
pub const CANONICAL_RIGHT: [f64; 2] = [108.0, 56.0];
/// Eye window on the aligned face: rows `32..80`, columns `8..136`.
pub const CROP_ROW: usize = 32;
pub const CROP_COL: usize = 8;
pub const CROP_H: usize = 48;
pub const CROP_W: usize = 128;

/// Owned 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// A decoded input image, gray (P5) or RGB (P6).
#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    Gray(GrayImage),
    Rgb { width: usize, height: usize, data: Vec<u8> },
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| data_err!("{}: not a readable PGM/PPM image ({e})", path.display()))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    match decode(path)? {
        DynamicImage::ImageLuma8(img) => Ok(Raster::Gray(GrayImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })),
        DynamicImage::ImageRgb8(img) => Ok(Raster::Rgb {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        }),
        other => Err(data_err!(
            "{}: unsupported pixel layout {:?} (expected 8-bit gray or RGB)",
            path.display(),
            other.color()
        )),
    }
}

/// Reads an 8-bit PGM; RGB inputs are converted to gray.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    match read_raster(path)? {
        Raster::Gray(g) => Ok(g),
        Raster::Rgb { width, height, data } => Ok(GrayImage {
            width,
            height,
            data: to_grayscale(&data, 3)?,
        }),
    }
}

/// BT.601 luma `0.299 R + 0.587 G + 0.114 B`, rounded half up, in integer
/// arithmetic.
pub fn to_grayscale(pixels: &[u8], channels: usize) -> Result<Vec<u8>> {
    if channels != 3 {
        return Err(data_err!("grayscale conversion expects 3 channels, got {channels}"));
    }
    if !pixels.len().is_multiple_of(3) {
        return Err(data_err!("RGB buffer length {} is not a multiple of 3", pixels.len()));
    }
    Ok(pixels
        .chunks_exact(3)
        .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8)
        .collect())
}

/// Real-valued single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn tap(&self, x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize] as f64
        }
    }

    /// Bilinear read at `(x, y)` with pixel centers on integer coordinates;
    /// reads outside the image are zero.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let top = self.tap(xi, yi) * (1.0 - fx) + self.tap(xi + 1, yi) * fx;
        let bottom = self.tap(xi, yi + 1) * (1.0 - fx) + self.tap(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// `1 x 1 x H x W` tensor.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
    }
}

/// Outer eye corners in source-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub left: [f64; 2],
    pub right: [f64; 2],
}

impl Landmarks {
    pub fn parse(json: &str) -> Result<Self> {
        let lm: Self = serde_json::from_str(json).map_err(|e| data_err!("malformed landmark JSON: {e}"))?;
        if !lm.left.iter().chain(&lm.right).all(|v| v.is_finite()) {
            return Err(data_err!("landmark coordinates must be finite"));
        }
        Ok(lm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Similarity warp taking the landmarks to the canonical corners, resampled
/// bilinearly into a 144x144 canvas.
pub fn align_face(image: &Plane, lm: &Landmarks) -> Result<Plane> {
    let (px, py) = (lm.right[0] - lm.left[0], lm.right[1] - lm.left[1]);
    if px * px + py * py < 1e-12 {
        return Err(data_err!("degenerate landmarks: eye corners coincide at {:?}", lm.left));
    }
    // Source offset = z * canonical offset, with z a complex scale-rotation.
    let (qx, qy) = (
        CANONICAL_RIGHT[0] - CANONICAL_LEFT[0],
        CANONICAL_RIGHT[1] - CANONICAL_LEFT[1],
    );
    let q2 = qx * qx + qy * qy;
    let (zr, zi) = ((px * qx + py * qy) / q2, (py * qx - px * qy) / q2);
    let mut data = Vec::with_capacity(FACE_SIZE * FACE_SIZE);
    for r in 0..FACE_SIZE {
        for c in 0..FACE_SIZE {
            let (dx, dy) = (c as f64 - CANONICAL_LEFT[0], r as f64 - CANONICAL_LEFT[1]);
            let sx = lm.left[0] + zr * dx - zi * dy;
            let sy = lm.left[1] + zi * dx + zr * dy;
            data.push(image.sample(sx, sy) as f32);
        }
    }
    Ok(Plane {
        width: FACE_SIZE,
        height: FACE_SIZE,
        data,
    })
}

pub fn crop_eye_region(face: &Plane) -> Result<Plane> {
    if face.width != FACE_SIZE || face.height != FACE_SIZE {
        return Err(data_err!(
            "eye crop expects a {FACE_SIZE}x{FACE_SIZE} face, got {}x{}",
            face.width,
            face.height
        ));
    }
    let mut data = Vec::with_capacity(CROP_H * CROP_W);
    for r in CROP_ROW..CROP_ROW + CROP_H {
        data.extend_from_slice(&face.data[r * FACE_SIZE + CROP_COL..r * FACE_SIZE + CROP_COL + CROP_W]);
    }
    Ok(Plane {
        width: CROP_W,
        height: CROP_H,
        data,
    })
}

/// Clamps values into `[0, 255]` and returns how many were clamped. More
/// than 1% out of range (or any NaN) is treated as a format bug.
pub fn assert_pixel_range(plane: &mut Plane) -> Result<usize> {
    if plane.data.iter().any(|v| v.is_nan()) {
        return Err(data_err!("image contains NaN pixels"));
    }
    let out = plane.data.iter().filter(|&&v| !(0.0..=255.0).contains(&v)).count();
    if out * 100 > plane.data.len() {
        return Err(data_err!(
            "{out} of {} pixels lie outside [0, 255]; input is probably mis-scaled",
            plane.data.len()
        ));
    }
    if out > 0 {
        log::warn!("clamped {out} out-of-range pixels");
        for v in &mut plane.data {
            *v = v.clamp(0.0, 255.0);
        }
    }
    Ok(out)
}

/// Full pipeline to a network-ready crop. Without landmarks the image must
/// already be a 48x128 crop.
pub fn prepare_crop(raster: &Raster, landmarks: Option<&Landmarks>) -> Result<Plane> {
    let gray = match raster {
        Raster::Gray(g) => g.clone(),
        Raster::Rgb { width, height, data } => GrayImage {
            width: *width,
            height: *height,
            data: to_grayscale(data, 3)?,
        },
    };
    let plane = Plane::from_gray(&gray);
    let mut crop = match landmarks {
        Some(lm) => crop_eye_region(&align_face(&plane, lm)?)?,
        None => {
            if gray.width != CROP_W || gray.height != CROP_H {
                return Err(data_err!(
                    "without landmarks the image must be a {CROP_W}x{CROP_H} crop, got {}x{}",
                    gray.width,
                    gray.height
                ));
            }
            plane
        }
    };
    assert_pixel_range(&mut crop)?;
    Ok(crop)
}
